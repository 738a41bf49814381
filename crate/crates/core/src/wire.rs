//! Versioned binary record formats: magic bytes, a format version, a
//! little-endian u32 shape header, then the payload. Latent payloads are
//! 64-bit little-endian floats.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::types::{AudioClip, LatentClip, Stream, Token};

pub const FORMAT_VERSION: u32 = 1;
pub const MAGIC_AUDIO: &[u8; 4] = b"ACLP";
pub const MAGIC_VIDEO: &[u8; 4] = b"VCLP";
pub const MAGIC_TOKENS: &[u8; 4] = b"TOKS";
pub const MAGIC_DATASET: &[u8; 4] = b"AVDS";
pub const MAGIC_STREAM: &[u8; 4] = b"AVST";

pub fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub fn write_header(w: &mut impl Write, magic: &[u8; 4]) -> Result<()> {
    w.write_all(magic)?;
    write_u32(w, FORMAT_VERSION)
}

pub fn read_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (supported: {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

/// Length-prefixed byte block (u32 length).
pub fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    write_u32(w, bytes.len() as u32)?;
    w.write_all(bytes)?;
    Ok(())
}

pub fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn write_audio_clip(w: &mut impl Write, clip: &AudioClip) -> Result<()> {
    write_header(w, MAGIC_AUDIO)?;
    write_u32(w, clip.codebooks() as u32)?;
    write_u32(w, clip.len() as u32)?;
    for row in clip.rows() {
        for tok in row {
            write_u32(w, tok.id)?;
        }
    }
    Ok(())
}

pub fn read_audio_clip(r: &mut impl Read) -> Result<AudioClip> {
    read_header(r, MAGIC_AUDIO)?;
    let c = read_u32(r)? as usize;
    let t = read_u32(r)? as usize;
    let mut rows = Vec::with_capacity(c);
    for _ in 0..c {
        let mut row = Vec::with_capacity(t);
        for _ in 0..t {
            row.push(read_u32(r)?);
        }
        rows.push(row);
    }
    AudioClip::from_ids(&rows)
}

pub fn write_latent_clip(w: &mut impl Write, clip: &LatentClip) -> Result<()> {
    write_header(w, MAGIC_VIDEO)?;
    write_u32(w, clip.len() as u32)?;
    write_u32(w, clip.dim() as u32)?;
    for v in clip.data() {
        write_f64(w, *v)?;
    }
    Ok(())
}

pub fn read_latent_clip(r: &mut impl Read) -> Result<LatentClip> {
    read_header(r, MAGIC_VIDEO)?;
    let l = read_u32(r)? as usize;
    let d = read_u32(r)? as usize;
    let mut data = Vec::with_capacity(l * d);
    for _ in 0..l * d {
        data.push(read_f64(r)?);
    }
    LatentClip::new(l, d, data)
}

fn stream_tag(stream: Stream) -> u32 {
    match stream {
        Stream::Text => 0,
        Stream::Audio(k) => 1 + k as u32,
    }
}

fn stream_from_tag(tag: u32) -> Stream {
    if tag == 0 {
        Stream::Text
    } else {
        Stream::Audio((tag - 1) as u8)
    }
}

/// A homogeneous token list (single stream).
pub fn write_tokens(w: &mut impl Write, tokens: &[Token]) -> Result<()> {
    write_header(w, MAGIC_TOKENS)?;
    let tag = tokens.first().map_or(0, |t| stream_tag(t.stream));
    write_u32(w, tag)?;
    write_u32(w, tokens.len() as u32)?;
    for tok in tokens {
        if stream_tag(tok.stream) != tag {
            return Err(Error::Format("mixed streams in one token record".into()));
        }
        write_u32(w, tok.id)?;
    }
    Ok(())
}

pub fn read_tokens(r: &mut impl Read) -> Result<Vec<Token>> {
    read_header(r, MAGIC_TOKENS)?;
    let tag = read_u32(r)?;
    let n = read_u32(r)? as usize;
    let stream = stream_from_tag(tag);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(Token { id: read_u32(r)?, stream });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_wrong_magic_and_version() {
        let clip = AudioClip::from_ids(&[vec![4, 5]]).unwrap();
        let mut buf = Vec::new();
        write_audio_clip(&mut buf, &clip).unwrap();
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(matches!(read_audio_clip(&mut wrong.as_slice()), Err(Error::Format(_))));
        let mut newer = buf.clone();
        newer[4] = 99;
        assert!(matches!(read_audio_clip(&mut newer.as_slice()), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn serialization_round_trips(
            ids in prop::collection::vec(prop::collection::vec(0u32..64, 5), 1..4),
            latents in prop::collection::vec(-10.0f64..10.0, 12),
            text_ids in prop::collection::vec(0u32..64, 0..8),
        ) {
            let clip = AudioClip::from_ids(&ids).unwrap();
            let mut buf = Vec::new();
            write_audio_clip(&mut buf, &clip).unwrap();
            prop_assert_eq!(read_audio_clip(&mut buf.as_slice()).unwrap(), clip);

            let lat = LatentClip::new(4, 3, latents).unwrap();
            let mut buf = Vec::new();
            write_latent_clip(&mut buf, &lat).unwrap();
            prop_assert_eq!(read_latent_clip(&mut buf.as_slice()).unwrap(), lat);

            let toks: Vec<Token> = text_ids.into_iter().map(Token::text).collect();
            let mut buf = Vec::new();
            write_tokens(&mut buf, &toks).unwrap();
            prop_assert_eq!(read_tokens(&mut buf.as_slice()).unwrap(), toks);
        }
    }
}
