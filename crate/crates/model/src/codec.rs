//! Binary wire encoding.
//!
//! Integers are big-endian, strings are `u16` length + UTF-8, blobs are
//! `u32` length + bytes. A facet is encoded as
//!
//! ```text
//! u8   kind (0 = specification, 1 = additional info)
//! str  facet id | service ref | content id | schema id | author | signer
//! [32] digest
//! blob canonical content
//! ```
//!
//! and a service as `str id, str name, str creator, u8 allow_add_info`,
//! then `u16` count + facets for specification and additional-info facets.

use crate::id::{ElementId, NodeId};
use crate::service::{Facet, FacetKind, ServiceEntry};
use crate::signature::{Signature, DIGEST_LEN};
use crate::xml::{parse_canonical, FacetXml};
use crate::ModelError;

#[derive(Default, Debug)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.u64(v.to_bits())
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        let len = u16::try_from(s.len()).expect("wire strings are shorter than 64 KiB");
        self.u16(len);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    pub fn blob(&mut self, b: &[u8]) -> &mut Self {
        let len = u32::try_from(b.len()).expect("wire blobs are shorter than 4 GiB");
        self.u32(len);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn raw(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn id(&mut self, id: &ElementId) -> &mut Self {
        self.str(&id.to_string())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.buf.len() < n {
            return Err(ModelError::Decode("truncated input"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn bool(&mut self) -> Result<bool, ModelError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(ModelError::Decode("invalid boolean")),
        }
    }

    pub fn str(&mut self) -> Result<String, ModelError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| ModelError::Decode("invalid utf-8"))
    }

    pub fn blob(&mut self) -> Result<&'a [u8], ModelError> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    pub fn raw(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        self.take(n)
    }

    pub fn id(&mut self) -> Result<ElementId, ModelError> {
        self.str()?.parse()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Result<(), ModelError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Decode("trailing bytes"))
        }
    }
}

pub fn write_facet(w: &mut Writer, facet: &Facet) {
    w.u8(match facet.kind {
        FacetKind::Specification => 0,
        FacetKind::AdditionalInfo => 1,
    });
    w.id(&facet.id)
        .id(&facet.service_ref)
        .id(facet.content.id())
        .str(&facet.schema_id)
        .str(facet.author.as_str())
        .str(facet.signature.signer.as_str())
        .raw(&facet.signature.digest)
        .blob(&facet.content.canonicalize());
}

pub fn read_facet(r: &mut Reader<'_>) -> Result<Facet, ModelError> {
    let kind = match r.u8()? {
        0 => FacetKind::Specification,
        1 => FacetKind::AdditionalInfo,
        _ => return Err(ModelError::Decode("invalid facet kind")),
    };
    let id = r.id()?;
    let service_ref = r.id()?;
    let content_id = r.id()?;
    let schema_id = r.str()?;
    let author = NodeId::new(r.str()?);
    let signer = NodeId::new(r.str()?);
    let digest: [u8; DIGEST_LEN] = r.raw(DIGEST_LEN)?.try_into().unwrap();
    let root = parse_canonical(r.blob()?)?;
    let content = FacetXml::from_parts(content_id, schema_id.clone(), root)?;
    Ok(Facet {
        id,
        kind,
        schema_id,
        content,
        author,
        signature: Signature { signer, digest },
        service_ref,
    })
}

pub fn encode_facet(facet: &Facet) -> Vec<u8> {
    let mut w = Writer::new();
    write_facet(&mut w, facet);
    w.finish()
}

pub fn decode_facet(bytes: &[u8]) -> Result<Facet, ModelError> {
    let mut r = Reader::new(bytes);
    let facet = read_facet(&mut r)?;
    r.finish()?;
    Ok(facet)
}

pub fn write_service(w: &mut Writer, entry: &ServiceEntry) {
    w.id(&entry.id)
        .str(&entry.name)
        .str(entry.creator.as_str())
        .bool(entry.allow_add_info);
    for facets in [&entry.spec_facets, &entry.add_info_facets] {
        w.u16(u16::try_from(facets.len()).expect("fewer than 65536 facets"));
        for facet in facets {
            write_facet(w, facet);
        }
    }
}

pub fn read_service(r: &mut Reader<'_>) -> Result<ServiceEntry, ModelError> {
    let mut entry = ServiceEntry::new(r.id()?, r.str()?, NodeId::new(r.str()?), r.bool()?);
    for _ in 0..r.u16()? {
        entry.spec_facets.push(read_facet(r)?);
    }
    for _ in 0..r.u16()? {
        entry.add_info_facets.push(read_facet(r)?);
    }
    Ok(entry)
}

pub fn encode_service(entry: &ServiceEntry) -> Vec<u8> {
    let mut w = Writer::new();
    write_service(&mut w, entry);
    w.finish()
}

pub fn decode_service(bytes: &[u8]) -> Result<ServiceEntry, ModelError> {
    let mut r = Reader::new(bytes);
    let entry = read_service(&mut r)?;
    r.finish()?;
    Ok(entry)
}
