//! BVH hierarchy and motion parsing/writing.

use std::fmt::Write as _;

use gestor_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::rotation::{Axis, EulerOrder};
use crate::{DataError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    Position(Axis),
    Rotation(Axis),
}

impl Channel {
    fn parse(tok: &str) -> Option<Self> {
        let axis = match tok.as_bytes().first()? {
            b'X' | b'x' => Axis::X,
            b'Y' | b'y' => Axis::Y,
            b'Z' | b'z' => Axis::Z,
            _ => return None,
        };
        match &tok[1..].to_ascii_lowercase()[..] {
            "position" => Some(Channel::Position(axis)),
            "rotation" => Some(Channel::Rotation(axis)),
            _ => None,
        }
    }

    fn token(self) -> String {
        match self {
            Channel::Position(a) => format!("{}position", a.letter()),
            Channel::Rotation(a) => format!("{}rotation", a.letter()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: [f64; 3],
    pub channels: Vec<Channel>,
    pub end_site: Option<[f64; 3]>,
}

impl Joint {
    /// The joint's rotation order; identity-only joints default to ZXY.
    pub fn rotation_order(&self) -> Result<Option<EulerOrder>> {
        let axes: Vec<Axis> = self
            .channels
            .iter()
            .filter_map(|c| match c {
                Channel::Rotation(a) => Some(*a),
                Channel::Position(_) => None,
            })
            .collect();
        match axes.len() {
            0 => Ok(None),
            3 => Ok(Some(EulerOrder::new([axes[0], axes[1], axes[2]])?)),
            n => Err(DataError::Parse {
                line: 0,
                msg: format!("joint {} has {n} rotation channels, need 0 or 3", self.name),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joints: Vec<Joint>,
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        let roots = joints.iter().filter(|j| j.parent.is_none()).count();
        if roots != 1 || joints.first().is_some_and(|j| j.parent.is_some()) {
            return Err(DataError::Parse {
                line: 0,
                msg: format!("skeleton needs exactly one root listed first, found {roots}"),
            });
        }
        for (i, j) in joints.iter().enumerate() {
            if j.parent.is_some_and(|p| p >= i) {
                return Err(DataError::Parse {
                    line: 0,
                    msg: format!("joint {} lists a parent that does not precede it", j.name),
                });
            }
        }
        Ok(Self { joints })
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn channel_count(&self) -> usize {
        self.joints.iter().map(|j| j.channels.len()).sum()
    }

    /// Offset of each joint's first channel within a frame row.
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

    pub fn names(&self) -> Vec<String> {
        self.joints.iter().map(|j| j.name.clone()).collect()
    }
}

/// A parsed BVH file: skeleton plus a frames×channels value table.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    pub skeleton: Skeleton,
    pub frames: Tensor,
    pub frame_time: f64,
}

impl MotionClip {
    pub fn new(skeleton: Skeleton, frames: Tensor, frame_time: f64) -> Result<Self> {
        if frames.rank() != 2 || frames.cols() != skeleton.channel_count() {
            return Err(DataError::FrameCount {
                expected: skeleton.channel_count(),
                got: if frames.rank() == 2 { frames.cols() } else { 0 },
            });
        }
        if !(frame_time > 0.0 && frame_time.is_finite()) {
            return Err(DataError::Parse {
                line: 0,
                msg: format!("frame time must be positive, got {frame_time}"),
            });
        }
        Ok(Self {
            skeleton,
            frames,
            frame_time,
        })
    }

    pub fn fps(&self) -> f64 {
        1.0 / self.frame_time
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn seconds(&self) -> f64 {
        self.len() as f64 * self.frame_time
    }
}

struct Tokens<'a> {
    toks: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let toks = text
            .lines()
            .enumerate()
            .flat_map(|(i, l)| l.split_whitespace().map(move |t| (i + 1, t)))
            .collect();
        Self { toks, pos: 0 }
    }

    fn line(&self) -> usize {
        self.toks
            .get(self.pos)
            .or(self.toks.last())
            .map(|t| t.0)
            .unwrap_or(0)
    }

    fn err(&self, msg: impl Into<String>) -> DataError {
        DataError::Parse {
            line: self.line(),
            msg: msg.into(),
        }
    }

    fn peek(&self) -> Option<&'a str> {
        self.toks.get(self.pos).map(|t| t.1)
    }

    fn next(&mut self) -> Result<&'a str> {
        let t = self.peek().ok_or_else(|| self.err("unexpected end of file"))?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        let got = self.next()?;
        if !got.eq_ignore_ascii_case(want) {
            self.pos -= 1;
            return Err(self.err(format!("expected `{want}`, found `{got}`")));
        }
        Ok(())
    }

    fn number(&mut self) -> Result<f64> {
        let t = self.next()?;
        t.parse().map_err(|_| {
            self.pos -= 1;
            self.err(format!("expected a number, found `{t}`"))
        })
    }

    fn vec3(&mut self) -> Result<[f64; 3]> {
        Ok([self.number()?, self.number()?, self.number()?])
    }
}

fn parse_joint(t: &mut Tokens, parent: Option<usize>, out: &mut Vec<Joint>) -> Result<()> {
    let name = t.next()?.to_string();
    t.expect("{")?;
    t.expect("OFFSET")?;
    let offset = t.vec3()?;
    let mut channels = Vec::new();
    if t.peek().is_some_and(|p| p.eq_ignore_ascii_case("CHANNELS")) {
        t.next()?;
        let n = t.number()?;
        if n < 0.0 || n.fract() != 0.0 {
            return Err(t.err(format!("bad channel count {n}")));
        }
        for _ in 0..n as usize {
            let tok = t.next()?;
            channels.push(Channel::parse(tok).ok_or_else(|| DataError::UnknownChannel(tok.to_string()))?);
        }
    }
    let index = out.len();
    out.push(Joint {
        name,
        parent,
        offset,
        channels,
        end_site: None,
    });
    loop {
        match t.next()? {
            "}" => return Ok(()),
            k if k.eq_ignore_ascii_case("JOINT") => parse_joint(t, Some(index), out)?,
            k if k.eq_ignore_ascii_case("End") => {
                t.expect("Site")?;
                t.expect("{")?;
                t.expect("OFFSET")?;
                out[index].end_site = Some(t.vec3()?);
                t.expect("}")?;
            }
            other => {
                t.pos -= 1;
                return Err(t.err(format!("unexpected `{other}` inside joint")));
            }
        }
    }
}

pub fn parse_bvh(text: &str) -> Result<MotionClip> {
    let mut t = Tokens::new(text);
    if !t.peek().is_some_and(|p| p.eq_ignore_ascii_case("HIERARCHY")) {
        return Err(DataError::MissingSection("HIERARCHY"));
    }
    t.next()?;
    t.expect("ROOT")?;
    let mut joints = Vec::new();
    parse_joint(&mut t, None, &mut joints)?;
    let skeleton = Skeleton::new(joints)?;
    match t.peek() {
        Some(p) if p.eq_ignore_ascii_case("MOTION") => {
            t.next()?;
        }
        Some(p) => return Err(t.err(format!("expected MOTION section, found `{p}`"))),
        None => return Err(DataError::MissingSection("MOTION")),
    }
    t.expect("Frames:")?;
    let n = t.number()?;
    if n < 0.0 || n.fract() != 0.0 {
        return Err(t.err(format!("bad frame count {n}")));
    }
    let n = n as usize;
    t.expect("Frame")?;
    t.expect("Time:")?;
    let frame_time = t.number()?;
    let c = skeleton.channel_count();
    let remaining = t.toks.len() - t.pos;
    if remaining != n * c {
        return Err(DataError::FrameCount {
            expected: n * c,
            got: remaining,
        });
    }
    let mut data = Vec::with_capacity(n * c);
    for _ in 0..n * c {
        data.push(t.number()?);
    }
    MotionClip::new(skeleton, Tensor::new(&[n, c], data)?, frame_time)
}

pub fn write_bvh(clip: &MotionClip) -> String {
    fn joint(out: &mut String, sk: &Skeleton, i: usize, depth: usize) {
        let pad = "  ".repeat(depth);
        let j = &sk.joints[i];
        let kind = if j.parent.is_none() { "ROOT" } else { "JOINT" };
        let _ = writeln!(out, "{pad}{kind} {}", j.name);
        let _ = writeln!(out, "{pad}{{");
        let _ = writeln!(out, "{pad}  OFFSET {} {} {}", j.offset[0], j.offset[1], j.offset[2]);
        if !j.channels.is_empty() {
            let toks: Vec<String> = j.channels.iter().map(|c| c.token()).collect();
            let _ = writeln!(out, "{pad}  CHANNELS {} {}", toks.len(), toks.join(" "));
        }
        for (k, child) in sk.joints.iter().enumerate() {
            if child.parent == Some(i) {
                joint(out, sk, k, depth + 1);
            }
        }
        if let Some(e) = j.end_site {
            let _ = writeln!(out, "{pad}  End Site");
            let _ = writeln!(out, "{pad}  {{");
            let _ = writeln!(out, "{pad}    OFFSET {} {} {}", e[0], e[1], e[2]);
            let _ = writeln!(out, "{pad}  }}");
        }
        let _ = writeln!(out, "{pad}}}");
    }
    let mut out = String::from("HIERARCHY\n");
    joint(&mut out, &clip.skeleton, 0, 0);
    let _ = writeln!(out, "MOTION\nFrames: {}\nFrame Time: {}", clip.len(), clip.frame_time);
    for r in 0..clip.len() {
        let row: Vec<String> = clip.frames.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}
