//! Byte-exact `SKVC` container serialization.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SKVC" | version u16 | fingerprint u64 | config_len u32 | config utf-8
//! centroid: token_count u16 | tokens u16 × n | kv f32 × n·kv_dim
//! member_count u16
//! member: session u32 | centroid u32 | divergence u16 | positions u16
//!         position: depth u8 | scale f32 | codes packed to a byte boundary
//! ```
//!
//! A file is a concatenation of containers.

use std::collections::BTreeMap;

use super::quant::{pack, packed_len, unpack, QuantRecord, MAX_DEPTH};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SKVC";
pub const VERSION: u16 = 1;
/// Centroid id carried by members of a container without a centroid.
pub const NO_CENTROID: u32 = u32::MAX;
/// Per-member header: session, centroid, divergence, position count.
pub const MEMBER_HEADER_BITS: u64 = 32 + 32 + 16 + 16;

#[derive(Debug, Clone, PartialEq)]
pub struct MemberSection {
    pub session: u32,
    pub centroid: u32,
    pub divergence: u16,
    pub records: Vec<QuantRecord>,
}

impl MemberSection {
    pub fn bits(&self, dim: usize) -> u64 {
        MEMBER_HEADER_BITS + self.records.iter().map(|r| r.bits(dim)).sum::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub fingerprint: u64,
    pub config_text: String,
    pub centroid_tokens: Vec<u16>,
    /// `centroid_tokens.len() × kv_dim` values, position-major.
    pub centroid_kv: Vec<f32>,
    pub members: Vec<MemberSection>,
}

/// Bits of everything in a container except member sections.
pub fn fixed_bits(config_len: usize, centroid_tokens: usize, kv_dim: usize) -> u64 {
    let header = 32 + 16 + 64 + 32 + 8 * config_len as u64;
    let centroid = 16 + 16 * centroid_tokens as u64 + 32 * (centroid_tokens * kv_dim) as u64;
    header + centroid + 16
}

/// Parses `key=value` lines.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Corrupted(format!("config line {l:?} has no '='")))
        })
        .collect()
}

/// Vector width recorded in a container's config block.
pub fn kv_dim_of(text: &str) -> Result<usize> {
    parse_config_text(text)?
        .get("kv_dim")
        .and_then(|v| v.parse().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Corrupted("config block lacks a valid kv_dim".into()))
}

impl Container {
    pub fn kv_dim(&self) -> Result<usize> {
        kv_dim_of(&self.config_text)
    }

    pub fn fixed_bits(&self) -> Result<u64> {
        Ok(fixed_bits(
            self.config_text.len(),
            self.centroid_tokens.len(),
            self.kv_dim()?,
        ))
    }

    /// Serialized size in bits, computed from the structure.
    pub fn bits(&self) -> Result<u64> {
        let dim = self.kv_dim()?;
        Ok(self.fixed_bits()? + self.members.iter().map(|m| m.bits(dim)).sum::<u64>())
    }

    pub fn write_to(&self, out: &mut Vec<u8>) -> Result<()> {
        let dim = self.kv_dim()?;
        let count = |n: usize, what: &str| {
            u16::try_from(n)
                .map_err(|_| Error::InvalidArgument(format!("{what} count {n} exceeds u16")))
        };
        if self.centroid_kv.len() != self.centroid_tokens.len() * dim {
            return Err(Error::InvalidArgument(
                "centroid KV payload does not match its token count".into(),
            ));
        }
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        let config_len = u32::try_from(self.config_text.len())
            .map_err(|_| Error::InvalidArgument("config block too long".into()))?;
        out.extend_from_slice(&config_len.to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&count(self.centroid_tokens.len(), "centroid token")?.to_le_bytes());
        for t in &self.centroid_tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        for v in &self.centroid_kv {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&count(self.members.len(), "member")?.to_le_bytes());
        for m in &self.members {
            out.extend_from_slice(&m.session.to_le_bytes());
            out.extend_from_slice(&m.centroid.to_le_bytes());
            out.extend_from_slice(&m.divergence.to_le_bytes());
            out.extend_from_slice(&count(m.records.len(), "position")?.to_le_bytes());
            for r in &m.records {
                if r.depth > 0 && r.codes.len() != dim {
                    return Err(Error::InvalidArgument("record width mismatch".into()));
                }
                out.push(r.depth);
                out.extend_from_slice(&r.scale.to_le_bytes());
                out.extend_from_slice(&pack(&r.codes, r.depth));
            }
        }
        Ok(())
    }

    /// Reads one container from the front of `bytes`; returns it and the
    /// number of bytes consumed.
    pub fn read_from(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Corrupted("bad magic".into()));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::Corrupted(format!("unsupported version {version}")));
        }
        let fingerprint = r.u64("fingerprint")?;
        let config_len = r.u32("config length")? as usize;
        let config_text = std::str::from_utf8(r.take(config_len, "config block")?)
            .map_err(|_| Error::Corrupted("config block is not UTF-8".into()))?
            .to_string();
        let dim = kv_dim_of(&config_text)?;
        let n_tokens = r.u16("centroid token count")? as usize;
        let centroid_tokens = (0..n_tokens)
            .map(|_| r.u16("centroid tokens"))
            .collect::<Result<Vec<_>>>()?;
        let centroid_kv = (0..n_tokens * dim)
            .map(|_| r.f32("centroid KV"))
            .collect::<Result<Vec<_>>>()?;
        let n_members = r.u16("member count")? as usize;
        let mut members = Vec::with_capacity(n_members);
        for _ in 0..n_members {
            let session = r.u32("member session")?;
            let centroid = r.u32("member centroid")?;
            let divergence = r.u16("divergence position")?;
            let n_pos = r.u16("position count")? as usize;
            let mut records = Vec::with_capacity(n_pos);
            for _ in 0..n_pos {
                let depth = r.take(1, "depth")?[0];
                if depth > MAX_DEPTH {
                    return Err(Error::Corrupted(format!("record depth {depth}")));
                }
                let scale = r.f32("scale")?;
                let packed = r.take(packed_len(dim, depth), "packed codes")?;
                let codes = if depth == 0 {
                    Vec::new()
                } else {
                    unpack(packed, dim, depth)?
                };
                records.push(QuantRecord {
                    depth,
                    scale,
                    codes,
                });
            }
            members.push(MemberSection {
                session,
                centroid,
                divergence,
                records,
            });
        }
        Ok((
            Self {
                fingerprint,
                config_text,
                centroid_tokens,
                centroid_kv,
                members,
            },
            r.pos,
        ))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(what.to_string()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        self.array(what).map(u16::from_le_bytes)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.array(what).map(u32::from_le_bytes)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.array(what).map(u64::from_le_bytes)
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        self.array(what).map(f32::from_le_bytes)
    }
}

/// Serializes a sequence of containers into one file image.
pub fn write_all(containers: &[Container]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for c in containers {
        c.write_to(&mut out)?;
    }
    Ok(out)
}

/// Parses a file image into its containers.
pub fn read_all(mut bytes: &[u8]) -> Result<Vec<Container>> {
    if bytes.is_empty() {
        return Err(Error::Truncated("empty file".into()));
    }
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (c, used) = Container::read_from(bytes)?;
        out.push(c);
        bytes = &bytes[used..];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            fingerprint: 0x0123_4567_89ab_cdef,
            config_text: "kv_dim=3\nbits=2\n".into(),
            centroid_tokens: vec![1, 2],
            centroid_kv: vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.25],
            members: vec![
                MemberSection {
                    session: 9,
                    centroid: 4,
                    divergence: 1,
                    records: vec![
                        QuantRecord {
                            depth: 2,
                            scale: 0.75,
                            codes: vec![0, 3, 2],
                        },
                        QuantRecord {
                            depth: 0,
                            scale: 0.125,
                            codes: vec![],
                        },
                    ],
                },
                MemberSection {
                    session: 10,
                    centroid: 4,
                    divergence: 2,
                    records: vec![],
                },
            ],
        }
    }

    #[test]
    fn roundtrip_and_exact_length() {
        let c = sample();
        let bytes = write_all(std::slice::from_ref(&c)).unwrap();
        assert_eq!(bytes.len() as u64 * 8, c.bits().unwrap());
        assert_eq!(&bytes[..4], b"SKVC");
        assert_eq!(read_all(&bytes).unwrap(), vec![c]);
    }

    #[test]
    fn concatenated_containers() {
        let c = sample();
        let bytes = write_all(&[c.clone(), c.clone()]).unwrap();
        assert_eq!(read_all(&bytes).unwrap().len(), 2);
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let bytes = write_all(&[sample()]).unwrap();
        for cut in [0, 3, 10, bytes.len() - 1] {
            let err = read_all(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Truncated(_)), "cut {cut}: {err:?}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_all(&bad), Err(Error::Corrupted(_))));
    }
}
