use std::path::Path;

use ndarray::Array3;
use nifti::{
    Endianness, Extender, Extension, ExtensionSequence, InMemNiftiObject, NiftiError, NiftiHeader, NiftiObject,
    NiftiType, ReaderOptions,
};
use nifti::writer::WriterOptions;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::DataError;
use crate::container::{Container, Tensor, Values};
use crate::domain::{Geometry, LabelMap, Volume};

// NIfTI comment extension carrying the exact f64 geometry.
const ECODE_COMMENT: i32 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    NiftiGz,
    Container,
}

impl VolumeFormat {
    pub fn of(path: &Path) -> Result<Self, DataError> {
        let name = path.file_name().map(|n| n.to_string_lossy().to_lowercase()).unwrap_or_default();
        if name.ends_with(".nii.gz") {
            Ok(Self::NiftiGz)
        } else if name.ends_with(".nii") {
            Ok(Self::Nifti)
        } else if name.ends_with(".kgpl") {
            Ok(Self::Container)
        } else {
            Err(DataError::UnsupportedFormat(path.display().to_string()))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct GeometryExt {
    spacing: [f64; 3],
    origin: [f64; 3],
    #[serde(default)]
    num_classes: Option<usize>,
}

fn io_failure(path: &Path, reason: impl ToString) -> DataError {
    DataError::IoFailure { path: path.display().to_string(), reason: reason.to_string() }
}

fn nifti_err(path: &Path, e: NiftiError) -> DataError {
    match e {
        NiftiError::UnsupportedDataType(t) => {
            DataError::UnsupportedFormat(format!("{}: data type {:?}", path.display(), t))
        }
        other => io_failure(path, other),
    }
}

fn header_for(g: &Geometry) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    let s = g.spacing.map(|x| x as f32);
    let o = g.origin.map(|x| x as f32);
    h.pixdim = [1.0, s[0], s[1], s[2], 1.0, 1.0, 1.0, 1.0];
    h.xyzt_units = 2;
    h.sform_code = 1;
    h.qform_code = 1;
    h.srow_x = [s[0], 0.0, 0.0, o[0]];
    h.srow_y = [0.0, s[1], 0.0, o[1]];
    h.srow_z = [0.0, 0.0, s[2], o[2]];
    h.quatern_x = o[0];
    h.quatern_y = o[1];
    h.quatern_z = o[2];
    h
}

fn extensions(g: &Geometry, num_classes: Option<usize>) -> ExtensionSequence {
    let text = json!(GeometryExt { spacing: g.spacing, origin: g.origin, num_classes }).to_string();
    ExtensionSequence::new(Extender::from([1, 0, 0, 0]), vec![Extension::from_str(ECODE_COMMENT, &text)])
}

fn prepare_dir(path: &Path) -> Result<(), DataError> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    Ok(())
}

// Grid in our row-major order, laid out for the writer (which transposes to NIfTI's x-fastest order).
fn grid<T: Clone>(dims: [usize; 3], data: Vec<T>) -> Array3<T> {
    Array3::from_shape_vec(dims, data).expect("length matches dims")
}

struct Loaded {
    dims: [usize; 3],
    datatype: NiftiType,
    endianness: Endianness,
    raw: Vec<u8>,
    geometry: Geometry,
    num_classes: Option<usize>,
}

fn read_nifti(path: &Path) -> Result<Loaded, DataError> {
    let obj: InMemNiftiObject = ReaderOptions::new().read_file(path).map_err(|e| nifti_err(path, e))?;
    let header = obj.header().clone();
    let dim = header.dim().map_err(|e| nifti_err(path, e))?;
    if dim.len() != 3 {
        return Err(DataError::UnsupportedFormat(format!("{}: {}-d image", path.display(), dim.len())));
    }
    let dims = [dim[0] as usize, dim[1] as usize, dim[2] as usize];
    let datatype = header.data_type().map_err(|e| nifti_err(path, e))?;
    let exact: Option<GeometryExt> = obj
        .extensions()
        .iter()
        .filter(|e| e.code() == ECODE_COMMENT)
        .find_map(|e| {
            let text = String::from_utf8_lossy(e.data());
            serde_json::from_str(text.trim_end_matches('\0')).ok()
        });
    let (spacing, origin, num_classes) = match exact {
        Some(x) => (x.spacing, x.origin, x.num_classes),
        None => (
            [1, 2, 3].map(|a| header.pixdim[a] as f64),
            [header.srow_x[3], header.srow_y[3], header.srow_z[3]].map(|x| x as f64),
            None,
        ),
    };
    let geometry = Geometry::new(dims, spacing, origin)?;
    let raw = obj.into_volume().into_raw_data();
    let expected = geometry.len() * datatype.size_of();
    if raw.len() < expected {
        return Err(io_failure(path, format!("{} data bytes, expected {}", raw.len(), expected)));
    }
    Ok(Loaded { dims, datatype, endianness: header.endianness, raw, geometry, num_classes })
}

impl Loaded {
    /// Values in row-major order, decoded through `f` from raw element bytes.
    fn values<T>(&self, f: impl Fn(&[u8]) -> T) -> Vec<T> {
        let [d, h, w] = self.dims;
        let size = self.datatype.size_of();
        let mut out = Vec::with_capacity(d * h * w);
        for i in 0..d {
            for j in 0..h {
                for k in 0..w {
                    let at = (i + d * (j + h * k)) * size;
                    out.push(f(&self.raw[at..at + size]));
                }
            }
        }
        out
    }

    fn big(&self) -> bool {
        self.endianness == Endianness::Big
    }
}

macro_rules! decode {
    ($ty:ty, $big:expr, $bytes:expr) => {{
        let arr: [u8; std::mem::size_of::<$ty>()] = $bytes.try_into().unwrap();
        if $big {
            <$ty>::from_be_bytes(arr)
        } else {
            <$ty>::from_le_bytes(arr)
        }
    }};
}

fn save_container(path: &Path, kind: &str, g: &Geometry, values: Values, num_classes: Option<usize>) -> Result<(), DataError> {
    let mut c = Container::new(json!({
        "kind": kind,
        "geometry": g,
        "num_classes": num_classes,
    }));
    c.push(Tensor::new("data", &g.dims, values));
    c.write(path)?;
    Ok(())
}

fn load_container(path: &Path, kind: &str) -> Result<(Geometry, Values, Option<usize>), DataError> {
    let c = Container::read(path)?;
    if c.meta["kind"] != kind {
        return Err(DataError::UnsupportedFormat(format!("{}: not a {} container", path.display(), kind)));
    }
    let geometry: Geometry =
        serde_json::from_value(c.meta["geometry"].clone()).map_err(|e| io_failure(path, e))?;
    let geometry = Geometry::new(geometry.dims, geometry.spacing, geometry.origin)?;
    let num_classes = c.meta["num_classes"].as_u64().map(|k| k as usize);
    let t = c.get("data").ok_or_else(|| io_failure(path, "missing data tensor"))?;
    if t.shape != geometry.dims {
        return Err(io_failure(path, "data shape disagrees with geometry"));
    }
    Ok((geometry, t.values.clone(), num_classes))
}

pub fn save_volume(path: &Path, v: &Volume) -> Result<(), DataError> {
    let format = VolumeFormat::of(path)?;
    prepare_dir(path)?;
    let g = v.geometry();
    match format {
        VolumeFormat::Container => save_container(path, "volume", g, Values::F64(v.data().to_vec()), None),
        _ => {
            let header = header_for(g);
            WriterOptions::new(path)
                .reference_header(&header)
                .compress(format == VolumeFormat::NiftiGz)
                .with_extensions(extensions(g, None))
                .write_nifti(&grid(g.dims, v.data().to_vec()))
                .map_err(|e| nifti_err(path, e))
        }
    }
}

pub fn load_volume(path: &Path) -> Result<Volume, DataError> {
    match VolumeFormat::of(path)? {
        VolumeFormat::Container => {
            let (g, values, _) = load_container(path, "volume")?;
            match values {
                Values::F64(v) => Ok(Volume::new(g, v)?),
                Values::F32(v) => Ok(Volume::new(g, v.into_iter().map(f64::from).collect())?),
                _ => Err(DataError::UnsupportedFormat(format!("{}: integer volume", path.display()))),
            }
        }
        _ => {
            let l = read_nifti(path)?;
            let big = l.big();
            let data = match l.datatype {
                NiftiType::Float64 => l.values(|b| decode!(f64, big, b)),
                NiftiType::Float32 => l.values(|b| decode!(f32, big, b) as f64),
                NiftiType::Int16 => l.values(|b| decode!(i16, big, b) as f64),
                NiftiType::Uint16 => l.values(|b| decode!(u16, big, b) as f64),
                NiftiType::Int32 => l.values(|b| decode!(i32, big, b) as f64),
                NiftiType::Uint8 => l.values(|b| b[0] as f64),
                other => {
                    return Err(DataError::UnsupportedFormat(format!("{}: data type {:?}", path.display(), other)))
                }
            };
            Ok(Volume::new(l.geometry, data)?)
        }
    }
}

pub fn save_labels(path: &Path, m: &LabelMap) -> Result<(), DataError> {
    let format = VolumeFormat::of(path)?;
    prepare_dir(path)?;
    let g = m.geometry();
    let labels: Vec<u16> = m.iter().map(|l| l as u16).collect();
    match format {
        VolumeFormat::Container => save_container(path, "labels", g, Values::U16(labels), Some(m.num_classes())),
        _ => {
            let header = header_for(g);
            WriterOptions::new(path)
                .reference_header(&header)
                .compress(format == VolumeFormat::NiftiGz)
                .with_extensions(extensions(g, Some(m.num_classes())))
                .write_nifti(&grid(g.dims, labels))
                .map_err(|e| nifti_err(path, e))
        }
    }
}

pub fn load_labels(path: &Path) -> Result<LabelMap, DataError> {
    let (g, labels, k): (Geometry, Vec<usize>, Option<usize>) = match VolumeFormat::of(path)? {
        VolumeFormat::Container => {
            let (g, values, k) = load_container(path, "labels")?;
            let labels = match values {
                Values::U16(v) => v.into_iter().map(usize::from).collect(),
                Values::U8(v) => v.into_iter().map(usize::from).collect(),
                _ => return Err(DataError::UnsupportedFormat(format!("{}: float labels", path.display()))),
            };
            (g, labels, k)
        }
        _ => {
            let l = read_nifti(path)?;
            let big = l.big();
            let labels: Vec<i64> = match l.datatype {
                NiftiType::Uint8 => l.values(|b| b[0] as i64),
                NiftiType::Uint16 => l.values(|b| decode!(u16, big, b) as i64),
                NiftiType::Int16 => l.values(|b| decode!(i16, big, b) as i64),
                NiftiType::Int32 => l.values(|b| decode!(i32, big, b) as i64),
                other => {
                    return Err(DataError::UnsupportedFormat(format!("{}: label type {:?}", path.display(), other)))
                }
            };
            if labels.iter().any(|&x| x < 0) {
                return Err(io_failure(path, "negative label"));
            }
            (l.geometry, labels.into_iter().map(|x| x as usize).collect(), l.num_classes)
        }
    };
    let k = k.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    Ok(LabelMap::new(g, k, &labels)?)
}
