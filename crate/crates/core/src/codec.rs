//! Sender-side map transformations: one-hot planes, the `SCPM` run-length
//! wire format, and power normalization of the transmitted planes.
//!
//! Wire layout of an `SCPM` payload (all integers big-endian):
//!
//! ```text
//! "SCPM"  version:u8=1  H:u16  W:u16  C_total:u16  C_p:u16  class_id:u16 * C_p
//! per plane: varint run lengths (first run counts zeros), then a 0 sentinel
//! ```
//!
//! Runs are scanned row-major. A run of length zero is only legal as the
//! first run of a plane that starts with a one.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SCPM";
pub const VERSION: u8 = 1;

/// Per-pixel class identifiers of an `height x width` image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap {
    height: usize,
    width: usize,
    classes: Vec<u16>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, classes: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || classes.len() != height * width {
            return Err(Error::Input(format!(
                "semantic map of {height}x{width} needs {} ids, got {}",
                height * width,
                classes.len()
            )));
        }
        Ok(SemanticMap { height, width, classes })
    }

    pub fn filled(height: usize, width: usize, class: u16) -> Self {
        SemanticMap { height, width, classes: vec![class; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u16] {
        &self.classes
    }

    pub fn classes_mut(&mut self) -> &mut [u16] {
        &mut self.classes
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.classes[y * self.width + x]
    }

    /// Sorted distinct ids.
    pub fn distinct(&self) -> Vec<u16> {
        let mut ids = self.classes.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn validate(&self, total_classes: usize) -> Result<()> {
        match self.classes.iter().find(|&&c| c as usize >= total_classes) {
            Some(c) => Err(Error::Input(format!("class id {c} >= class count {total_classes}"))),
            None => Ok(()),
        }
    }
}

/// Binary planes for the classes present in a map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotStack {
    height: usize,
    width: usize,
    total_classes: usize,
    present: Vec<u16>,
    planes: Vec<u8>,
}

impl OneHotStack {
    /// Builds a stack from raw planes, checking the partition property.
    pub fn from_planes(
        height: usize,
        width: usize,
        total_classes: usize,
        present: Vec<u16>,
        planes: Vec<u8>,
    ) -> Result<Self> {
        let hw = height * width;
        if hw == 0 || planes.len() != present.len() * hw || present.is_empty() {
            return Err(Error::Input("plane buffer does not match header".into()));
        }
        if present.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("present classes must be sorted and unique".into()));
        }
        if let Some(&c) = present.iter().find(|&&c| c as usize >= total_classes) {
            return Err(Error::Input(format!("class id {c} >= class count {total_classes}")));
        }
        for p in 0..hw {
            let mut ones = 0;
            for c in 0..present.len() {
                match planes[c * hw + p] {
                    0 => {}
                    1 => ones += 1,
                    v => return Err(Error::Input(format!("plane value {v} is not binary"))),
                }
            }
            if ones != 1 {
                return Err(Error::Input(format!("pixel {p} is set in {ones} planes")));
            }
        }
        for (c, &id) in present.iter().enumerate() {
            if !planes[c * hw..(c + 1) * hw].contains(&1) {
                return Err(Error::Input(format!("class {id} listed but absent")));
            }
        }
        Ok(OneHotStack { height, width, total_classes, present, planes })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn total_classes(&self) -> usize {
        self.total_classes
    }

    pub fn present(&self) -> &[u16] {
        &self.present
    }

    /// Planes, `present().len() x height x width`.
    pub fn planes(&self) -> &[u8] {
        &self.planes
    }

    pub fn plane(&self, i: usize) -> &[u8] {
        let hw = self.height * self.width;
        &self.planes[i * hw..(i + 1) * hw]
    }

    pub fn to_map(&self) -> SemanticMap {
        let hw = self.height * self.width;
        let mut classes = vec![0u16; hw];
        for (c, &id) in self.present.iter().enumerate() {
            for (p, &v) in self.plane(c).iter().enumerate() {
                if v == 1 {
                    classes[p] = id;
                }
            }
        }
        SemanticMap { height: self.height, width: self.width, classes }
    }

    /// All `total_classes` planes as reals, zero for absent classes.
    pub fn full_planes(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; self.total_classes * hw];
        for (c, &id) in self.present.iter().enumerate() {
            let dst = &mut out[id as usize * hw..(id as usize + 1) * hw];
            for (d, &v) in dst.iter_mut().zip(self.plane(c)) {
                *d = v as f32;
            }
        }
        out
    }
}

pub fn one_hot_encode(map: &SemanticMap, total_classes: usize) -> Result<OneHotStack> {
    map.validate(total_classes)?;
    let present = map.distinct();
    let hw = map.height * map.width;
    let mut planes = vec![0u8; present.len() * hw];
    for (p, &id) in map.classes.iter().enumerate() {
        let c = present.binary_search(&id).expect("id collected above");
        planes[c * hw + p] = 1;
    }
    Ok(OneHotStack {
        height: map.height,
        width: map.width,
        total_classes,
        present,
        planes,
    })
}

/// Compressed form of a [`OneHotStack`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransmitPayload {
    bytes: Vec<u8>,
}

impl TransmitPayload {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        TransmitPayload { bytes }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn header_len(&self) -> usize {
        let cp = self.bytes.get(11..13).map_or(0, |b| u16::from_be_bytes([b[0], b[1]]) as usize);
        13 + 2 * cp
    }

    pub fn bit_count(&self) -> u64 {
        8 * self.bytes.len() as u64
    }
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn get_varint(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let b = *bytes.get(*pos).ok_or_else(|| Error::Format("truncated varint".into()))?;
        *pos += 1;
        v |= ((b & 0x7f) as u64) << shift;
        if b & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(Error::Format("varint overflow".into()))
}

/// Run lengths of a binary plane, alternating zeros/ones, starting with zeros.
pub fn runs(plane: &[u8]) -> Vec<u64> {
    let mut out = Vec::new();
    let mut current = 0u8;
    let mut len = 0u64;
    for &v in plane {
        if v == current {
            len += 1;
        } else {
            out.push(len);
            current = v;
            len = 1;
        }
    }
    out.push(len);
    out
}

pub fn rle_pack(stack: &OneHotStack) -> Result<TransmitPayload> {
    let dims = [stack.height, stack.width, stack.total_classes, stack.present.len()];
    if dims.iter().any(|&d| d > u16::MAX as usize) {
        return Err(Error::Input(format!("dimensions {dims:?} exceed u16 range")));
    }
    let mut bytes = Vec::with_capacity(16 + stack.planes.len() / 8);
    bytes.extend_from_slice(MAGIC);
    bytes.push(VERSION);
    for d in dims {
        bytes.extend_from_slice(&(d as u16).to_be_bytes());
    }
    for &id in &stack.present {
        bytes.extend_from_slice(&id.to_be_bytes());
    }
    for c in 0..stack.present.len() {
        let rs = runs(stack.plane(c));
        for (i, &r) in rs.iter().enumerate() {
            debug_assert!(r > 0 || i == 0);
            put_varint(&mut bytes, r);
        }
        put_varint(&mut bytes, 0);
    }
    Ok(TransmitPayload { bytes })
}

pub fn rle_unpack(payload: &TransmitPayload) -> Result<OneHotStack> {
    let b = &payload.bytes;
    if b.len() < 13 || &b[..4] != MAGIC {
        return Err(Error::Format("missing SCPM magic".into()));
    }
    if b[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", b[4])));
    }
    let u16_at = |i: usize| u16::from_be_bytes([b[i], b[i + 1]]) as usize;
    let (h, w, total, cp) = (u16_at(5), u16_at(7), u16_at(9), u16_at(11));
    let mut pos = 13;
    if b.len() < pos + 2 * cp {
        return Err(Error::Format("truncated class list".into()));
    }
    let present: Vec<u16> = (0..cp).map(|i| u16_at(pos + 2 * i) as u16).collect();
    pos += 2 * cp;
    let hw = h * w;
    let mut planes = Vec::with_capacity(cp * hw);
    for _ in 0..cp {
        let start = planes.len();
        let mut value = 0u8;
        let mut first = true;
        loop {
            let r = get_varint(b, &mut pos)? as usize;
            let filled = planes.len() - start;
            // planes are never empty, so a leading 0 is an empty zero-run
            if r == 0 && !first {
                break;
            }
            if filled + r > hw {
                return Err(Error::Format("run overflows plane".into()));
            }
            planes.extend(std::iter::repeat(value).take(r));
            value ^= 1;
            first = false;
        }
        if planes.len() - start != hw {
            return Err(Error::Format("plane runs do not cover the plane".into()));
        }
    }
    if pos != b.len() {
        return Err(Error::Format("trailing bytes after last plane".into()));
    }
    OneHotStack::from_planes(h, w, total, present, planes)
        .map_err(|e| Error::Format(format!("decoded stack invalid: {e}")))
}

/// Real-valued symbols ready for the channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFrame {
    pub symbols: Vec<f64>,
    pub power: f64,
    pub scale: f64,
}

impl ChannelFrame {
    pub fn mean_square(&self) -> f64 {
        self.symbols.iter().map(|v| v * v).sum::<f64>() / self.symbols.len() as f64
    }
}

/// Scales the present-class planes so the mean-square symbol equals `power`.
pub fn power_normalize(stack: &OneHotStack, power: f64) -> Result<ChannelFrame> {
    let raw: Vec<f64> = stack.planes.iter().map(|&v| v as f64).collect();
    normalize_symbols(&raw, power)
}

/// Power normalization of arbitrary real symbols.
pub fn normalize_symbols(raw: &[f64], power: f64) -> Result<ChannelFrame> {
    if !(power > 0.0) || !power.is_finite() {
        return Err(Error::Config(format!("transmit power must be positive, got {power}")));
    }
    let ms = raw.iter().map(|v| v * v).sum::<f64>() / raw.len().max(1) as f64;
    if raw.is_empty() || ms == 0.0 {
        return Err(Error::Degenerate("cannot normalize an all-zero frame".into()));
    }
    let scale = (power / ms).sqrt();
    Ok(ChannelFrame {
        symbols: raw.iter().map(|v| v * scale).collect(),
        power,
        scale,
    })
}

/// Undo power normalization.
pub fn denormalize(symbols: &[f64], scale: f64) -> Vec<f64> {
    symbols.iter().map(|v| v / scale).collect()
}

/// What a bit budget is being computed for.
#[derive(Debug, Clone, Copy)]
pub enum BudgetItem<'a> {
    Payload(&'a TransmitPayload),
    RawRgb { height: usize, width: usize },
}

pub fn bit_budget(item: BudgetItem<'_>) -> u64 {
    match item {
        BudgetItem::Payload(p) => p.bit_count(),
        BudgetItem::RawRgb { height, width } => (height * width * 3 * 8) as u64,
    }
}
