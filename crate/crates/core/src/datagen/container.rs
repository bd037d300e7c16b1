//! `DLSD` container: magic, `u32` version, `u32` record count, then records.
//! Each record is a kind tag byte, a shape header (`u32` rank and extents),
//! a little-endian payload (`f32` for samples, `f64` for arrays) and a
//! kind-specific trailer. Everything is little-endian.

use std::fs;
use std::path::Path;

use super::{ClimateDataset, ClimateSample, Dataset, HepDataset, HepSample, Split};
use crate::error::{Error, Result};
use crate::models::BoxTarget;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DLSD";
pub const FORMAT_VERSION: u32 = 1;

const KIND_HEP: u8 = 0;
const KIND_CLIMATE: u8 = 1;
const KIND_ARRAY: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Hep(HepSample),
    Climate(ClimateSample),
    /// Labelled array kept at full precision: a run log table (one name per
    /// column) or a model parameter (one name).
    Array { names: Vec<String>, data: Tensor },
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} exceeds u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fn shape(&mut self, shape: &[usize]) -> Result<()> {
        self.u32(shape.len())?;
        shape.iter().try_for_each(|&e| self.u32(e))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: need {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()?;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| self.u32()).collect::<Result<_>>()?;
        let len = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        match len {
            Some(l) if l > 0 && l <= self.buf.len() => Ok(shape),
            _ => Err(Error::Format(format!("invalid tensor shape {shape:?}"))),
        }
    }
    fn tensor(&mut self, wide: bool) -> Result<Tensor> {
        let shape = self.shape()?;
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| if wide { self.f64() } else { self.f32() })
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_vec(&shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}

fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION as usize)?;
    w.u32(records.len())?;
    for rec in records {
        match rec {
            Record::Hep(s) => {
                w.u8(KIND_HEP);
                w.shape(s.image.shape())?;
                s.image.data().iter().for_each(|&v| w.f32(v));
                w.u8(s.split.code());
                w.u8(u8::from(s.signal));
                s.features.iter().for_each(|&v| w.f32(v));
            }
            Record::Climate(s) => {
                w.u8(KIND_CLIMATE);
                w.shape(s.image.shape())?;
                s.image.data().iter().for_each(|&v| w.f32(v));
                w.u8(s.split.code());
                w.u32(s.boxes.len())?;
                for b in &s.boxes {
                    w.u32(b.class)?;
                    [b.x, b.y, b.w, b.h].iter().for_each(|&v| w.f32(v));
                }
            }
            Record::Array { names, data } => {
                w.u8(KIND_ARRAY);
                w.shape(data.shape())?;
                data.data().iter().for_each(|&v| w.0.extend_from_slice(&v.to_le_bytes()));
                w.u32(names.len())?;
                for c in names {
                    w.u32(c.len())?;
                    w.0.extend_from_slice(c.as_bytes());
                }
            }
        }
    }
    Ok(w.0)
}

fn decode(buf: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("bad magic: not a DLSD container".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported container version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let count = r.u32()?;
    if count == 0 {
        return Err(Error::validation("container holds no records"));
    }
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let rec = match r.u8()? {
            KIND_HEP => {
                let image = r.tensor(false)?;
                let split = Split::from_code(r.u8()?)?;
                let signal = match r.u8()? {
                    0 => false,
                    1 => true,
                    v => return Err(Error::Format(format!("invalid label byte {v}"))),
                };
                let features = [r.f32()?, r.f32()?, r.f32()?];
                Record::Hep(HepSample { image, signal, features, split })
            }
            KIND_CLIMATE => {
                let image = r.tensor(false)?;
                let split = Split::from_code(r.u8()?)?;
                let n = r.u32()?;
                let boxes = (0..n)
                    .map(|_| {
                        Ok(BoxTarget {
                            class: r.u32()?,
                            x: r.f32()?,
                            y: r.f32()?,
                            w: r.f32()?,
                            h: r.f32()?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Record::Climate(ClimateSample { image, boxes, split })
            }
            KIND_ARRAY => {
                let data = r.tensor(true)?;
                let n = r.u32()?;
                let names = (0..n)
                    .map(|_| {
                        let len = r.u32()?;
                        String::from_utf8(r.take(len)?.to_vec())
                            .map_err(|_| Error::Format("array name is not UTF-8".into()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Record::Array { names, data }
            }
            k => return Err(Error::Format(format!("unknown record kind {k}"))),
        };
        out.push(rec);
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after last record", buf.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_container(path: &Path, records: &[Record]) -> Result<()> {
    fs::write(path, encode(records)?)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Vec<Record>> {
    decode(&fs::read(path)?)
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let records: Vec<Record> = match dataset {
        Dataset::Hep(d) => d.samples.iter().cloned().map(Record::Hep).collect(),
        Dataset::Climate(d) => d.samples.iter().cloned().map(Record::Climate).collect(),
    };
    write_container(path, &records)
}

/// Loads a dataset; every record must be a sample of the same kind.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let records = read_container(path)?;
    match &records[0] {
        Record::Hep(_) => records
            .into_iter()
            .map(|r| match r {
                Record::Hep(s) => Ok(s),
                _ => Err(Error::Format("mixed record kinds in dataset".into())),
            })
            .collect::<Result<Vec<_>>>()
            .map(|samples| Dataset::Hep(HepDataset { samples })),
        Record::Climate(_) => records
            .into_iter()
            .map(|r| match r {
                Record::Climate(s) => Ok(s),
                _ => Err(Error::Format("mixed record kinds in dataset".into())),
            })
            .collect::<Result<Vec<_>>>()
            .map(|samples| Dataset::Climate(ClimateDataset { samples })),
        Record::Array { .. } => Err(Error::Format("container holds arrays, not a dataset".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_climate, gen_hep};

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for (k, ds) in [
            Dataset::Hep(gen_hep(1, 6, 0.5).unwrap()),
            Dataset::Climate(gen_climate(1, 4).unwrap()),
        ]
        .into_iter()
        .enumerate()
        {
            let a = dir.path().join(format!("a{k}.dlsd"));
            let b = dir.path().join(format!("b{k}.dlsd"));
            save_dataset(&ds, &a).unwrap();
            let loaded = load_dataset(&a).unwrap();
            assert_eq!(loaded, ds);
            save_dataset(&loaded, &b).unwrap();
            assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        }
    }

    #[test]
    fn header_only_file_is_a_validation_error() {
        let mut buf = MAGIC.to_vec();
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode(&buf), Err(Error::Validation(_))));
    }

    #[test]
    fn corruption_is_a_format_error() {
        let ds = Dataset::Hep(gen_hep(2, 2, 0.5).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.dlsd");
        save_dataset(&ds, &p).unwrap();
        let good = fs::read(&p).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        assert!(matches!(decode(&good[..good.len() - 3]), Err(Error::Format(_))));
        let mut ver = good.clone();
        ver[4] = 9;
        assert!(matches!(decode(&ver), Err(Error::Format(_))));
    }

    #[test]
    fn array_round_trip_keeps_full_precision() {
        let data = Tensor::from_vec(&[2, 2], vec![0.1, 1.0 / 3.0, 1e300, -2.5]).unwrap();
        let rec = vec![Record::Array { names: vec!["a".into(), "b".into()], data }];
        assert_eq!(decode(&encode(&rec).unwrap()).unwrap(), rec);
    }
}
