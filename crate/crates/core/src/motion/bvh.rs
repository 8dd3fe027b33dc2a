//! BVH text reader and writer.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::rotation::{Axis, RotationOrder};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Position(Axis),
    Rotation(Axis),
}

impl Channel {
    fn parse(s: &str) -> Option<Self> {
        let axis = match s.chars().next()?.to_ascii_uppercase() {
            'X' => Axis::X,
            'Y' => Axis::Y,
            'Z' => Axis::Z,
            _ => return None,
        };
        match &s.get(1..)?.to_ascii_lowercase()[..] {
            "position" => Some(Channel::Position(axis)),
            "rotation" => Some(Channel::Rotation(axis)),
            _ => None,
        }
    }

    fn name(&self) -> String {
        match self {
            Channel::Position(a) => format!("{}position", a.letter()),
            Channel::Rotation(a) => format!("{}rotation", a.letter()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: [f64; 3],
    pub channels: Vec<Channel>,
    pub end_site: Option<[f64; 3]>,
}

impl Joint {
    /// Rotation order from the channel list; joints without rotation channels get `None`.
    pub fn rotation_order(&self) -> Result<Option<RotationOrder>> {
        let axes: Vec<Axis> = self
            .channels
            .iter()
            .filter_map(|c| match c {
                Channel::Rotation(a) => Some(*a),
                _ => None,
            })
            .collect();
        match axes.len() {
            0 => Ok(None),
            3 => RotationOrder::new([axes[0], axes[1], axes[2]]).map(Some),
            n => Err(Error::Format(format!(
                "joint `{}` has {n} rotation channels, expected 0 or 3",
                self.name
            ))),
        }
    }
}

/// Joints in file (topological) order; joint 0 is the root.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub joints: Vec<Joint>,
}

impl Skeleton {
    pub fn num_channels(&self) -> usize {
        self.joints.iter().map(|j| j.channels.len()).sum()
    }

    /// Column where each joint's channels start in a motion row.
    pub fn channel_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.joints
            .iter()
            .map(|j| {
                let o = acc;
                acc += j.channels.len();
                o
            })
            .collect()
    }

    /// D = 3 x joints
    pub fn rotation_dims(&self) -> usize {
        3 * self.joints.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bvh {
    pub skeleton: Skeleton,
    /// `frames x channels`, angles in degrees.
    pub motion: Array2<f64>,
    pub frame_time: f64,
}

impl Bvh {
    pub fn fps(&self) -> f64 {
        1.0 / self.frame_time
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        parse_bvh(&text).map_err(|e| e.in_file(path))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, write_bvh(self)).map_err(|e| Error::from(e).in_file(path))
    }
}

struct Tokens<'a> {
    items: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let items = text
            .lines()
            .enumerate()
            .flat_map(|(i, l)| l.split_whitespace().map(move |t| (i + 1, t)))
            .collect();
        Tokens { items, pos: 0 }
    }

    fn line(&self) -> usize {
        self.items
            .get(self.pos)
            .or(self.items.last())
            .map_or(1, |(l, _)| *l)
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line(),
            msg: msg.into(),
        }
    }

    fn peek(&self) -> Option<&'a str> {
        self.items.get(self.pos).map(|(_, t)| *t)
    }

    fn next(&mut self) -> Result<&'a str> {
        let t = self.peek().ok_or_else(|| self.err("unexpected end of file"))?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        let line = self.line();
        let t = self.next()?;
        if t.eq_ignore_ascii_case(want) {
            Ok(())
        } else {
            Err(Error::Parse {
                line,
                msg: format!("expected `{want}`, found `{t}`"),
            })
        }
    }

    fn number<T: std::str::FromStr>(&mut self) -> Result<T> {
        let line = self.line();
        let t = self.next()?;
        t.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("expected a number, found `{t}`"),
        })
    }

    fn vec3(&mut self) -> Result<[f64; 3]> {
        Ok([self.number()?, self.number()?, self.number()?])
    }
}

fn parse_joint(tok: &mut Tokens, parent: Option<usize>, joints: &mut Vec<Joint>) -> Result<()> {
    let name = tok.next()?.to_string();
    tok.expect("{")?;
    tok.expect("OFFSET")?;
    let offset = tok.vec3()?;
    tok.expect("CHANNELS")?;
    let line = tok.line();
    let n: usize = tok.number()?;
    let channels = (0..n)
        .map(|_| {
            let l = tok.line();
            let t = tok.next()?;
            Channel::parse(t).ok_or(Error::Parse {
                line: l,
                msg: format!("unknown channel `{t}`"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let idx = joints.len();
    joints.push(Joint {
        name,
        parent,
        offset,
        channels,
        end_site: None,
    });
    joints[idx].rotation_order().map_err(|e| Error::Parse {
        line,
        msg: e.to_string(),
    })?;
    loop {
        let t = tok.next()?;
        match t.to_ascii_uppercase().as_str() {
            "JOINT" => parse_joint(tok, Some(idx), joints)?,
            "END" => {
                tok.expect("Site")?;
                tok.expect("{")?;
                tok.expect("OFFSET")?;
                joints[idx].end_site = Some(tok.vec3()?);
                tok.expect("}")?;
            }
            "}" => return Ok(()),
            _ => {
                tok.pos -= 1;
                return Err(tok.err(format!("unexpected `{t}` in joint body")));
            }
        }
    }
}

pub fn parse_bvh(text: &str) -> Result<Bvh> {
    let mut tok = Tokens::new(text);
    tok.expect("HIERARCHY")?;
    let root_kw = tok.next()?;
    if !root_kw.eq_ignore_ascii_case("ROOT") {
        tok.pos -= 1;
        return Err(tok.err(format!("expected `ROOT`, found `{root_kw}`")));
    }
    let mut joints = Vec::new();
    parse_joint(&mut tok, None, &mut joints)?;
    if tok.peek().is_some_and(|t| t.eq_ignore_ascii_case("ROOT")) {
        return Err(tok.err("multiple roots are not supported"));
    }
    tok.expect("MOTION")?;
    tok.expect("Frames:")?;
    let frames: usize = tok.number()?;
    tok.expect("Frame")?;
    tok.expect("Time:")?;
    let frame_time: f64 = tok.number()?;
    if !(frame_time > 0.0 && frame_time.is_finite()) {
        return Err(tok.err(format!("frame time must be positive, got {frame_time}")));
    }
    let skeleton = Skeleton { joints };
    let cols = skeleton.num_channels();

    // data rows are line-based so the count check can point at the offending line
    let data_start = tok.line_of_next();
    let mut values = Vec::with_capacity(frames * cols);
    let mut rows = 0usize;
    for (i, line) in text.lines().enumerate().skip(data_start.saturating_sub(1)) {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let before = values.len();
        for t in trimmed.split_whitespace() {
            values.push(t.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("expected a number, found `{t}`"),
            })?);
        }
        if values.len() - before != cols {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("frame has {} values, expected {cols}", values.len() - before),
            });
        }
        rows += 1;
        if rows > frames {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("more data rows than the {frames} frames declared"),
            });
        }
    }
    if rows != frames {
        return Err(Error::Parse {
            line: text.lines().count().max(1),
            msg: format!("header declares {frames} frames but {rows} data rows follow"),
        });
    }
    let motion = Array2::from_shape_vec((frames, cols), values).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Bvh {
        skeleton,
        motion,
        frame_time,
    })
}

impl Tokens<'_> {
    /// Line of the next token, or one past the last line when exhausted.
    fn line_of_next(&self) -> usize {
        match self.items.get(self.pos) {
            Some((l, _)) => *l,
            None => self.items.last().map_or(1, |(l, _)| l + 1),
        }
    }
}

fn write_joint(out: &mut String, sk: &Skeleton, idx: usize, depth: usize) {
    let j = &sk.joints[idx];
    let pad = "  ".repeat(depth);
    let kw = if j.parent.is_none() { "ROOT" } else { "JOINT" };
    let _ = writeln!(out, "{pad}{kw} {}", j.name);
    let _ = writeln!(out, "{pad}{{");
    let [x, y, z] = j.offset;
    let _ = writeln!(out, "{pad}  OFFSET {x:.6} {y:.6} {z:.6}");
    let names: Vec<String> = j.channels.iter().map(Channel::name).collect();
    let _ = writeln!(out, "{pad}  CHANNELS {} {}", j.channels.len(), names.join(" "));
    for (c, child) in sk.joints.iter().enumerate() {
        if child.parent == Some(idx) {
            write_joint(out, sk, c, depth + 1);
        }
    }
    if let Some([x, y, z]) = j.end_site {
        let _ = writeln!(out, "{pad}  End Site");
        let _ = writeln!(out, "{pad}  {{");
        let _ = writeln!(out, "{pad}    OFFSET {x:.6} {y:.6} {z:.6}");
        let _ = writeln!(out, "{pad}  }}");
    }
    let _ = writeln!(out, "{pad}}}");
}

/// Fixed six-decimal formatting, so output is a pure function of the input bits.
pub fn write_bvh(bvh: &Bvh) -> String {
    let mut out = String::from("HIERARCHY\n");
    write_joint(&mut out, &bvh.skeleton, 0, 0);
    let _ = writeln!(out, "MOTION");
    let _ = writeln!(out, "Frames: {}", bvh.motion.nrows());
    let _ = writeln!(out, "Frame Time: {}", bvh.frame_time);
    for row in bvh.motion.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{:.6}", clean_zero(*v))).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

fn clean_zero(v: f64) -> f64 {
    if v.abs() < 5e-7 {
        0.0
    } else {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_names_round_trip() {
        for s in ["Xposition", "Yrotation", "Zrotation"] {
            assert_eq!(Channel::parse(s).unwrap().name(), s);
        }
        assert!(Channel::parse("Wrotation").is_none());
    }
}
