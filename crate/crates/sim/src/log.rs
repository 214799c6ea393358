//! Episode log serialization.
//!
//! Binary layout (little-endian throughout):
//!
//! ```text
//! header:  magic "DPL2" | version u16 | sample count u32
//! sample:  timestamp f64
//!          point count u32, then per point: x f32, y f32, z f32, class u8
//!          gnss lat f64, lon f64
//!          imu f32×9 (accel xyz, gyro xyz, mag xyz)
//!          omega_l f32, omega_r f32, steering f32, throttle f32
//!          gt waypoints f32×6 (x1,y1,x2,y2,x3,y3)
//!          command u8
//!          rp1 f32×2, rp2 f32×2
//! ```
//!
//! Floats are stored at sensor precision (f32) except timestamps and GNSS,
//! which keep full f64; rewriting a parsed log reproduces it byte for byte.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use lidarpilot_core::geonav::{GeoPoint, ImuSample};
use lidarpilot_core::projection::LabeledPoint;
use thiserror::Error;

pub const LOG_MAGIC: [u8; 4] = *b"DPL2";
pub const LOG_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected \"DPL2\", got {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported log version {0}")]
    BadVersion(u16),
    #[error("truncated log: {0}")]
    Truncated(&'static str),
}

/// One 4 Hz tick as recorded: applied controls, sensed values, and the
/// supervision targets filled in after the episode.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSample {
    pub timestamp: f64,
    pub points: Vec<LabeledPoint>,
    pub gnss: GeoPoint,
    pub imu: ImuSample,
    pub omega_l: f32,
    pub omega_r: f32,
    pub steering: f32,
    pub throttle: f32,
    /// Local-frame future positions at +1/+2/+3 s: x1,y1,x2,y2,x3,y3.
    pub gt_waypoints: [f32; 6],
    pub command: u8,
    /// Next two route points in the local frame.
    pub rp1: [f32; 2],
    pub rp2: [f32; 2],
}

fn put_f32(buf: &mut Vec<u8>, v: f32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn encode_sample(sample: &LogSample, buf: &mut Vec<u8>) {
    put_f64(buf, sample.timestamp);
    buf.extend_from_slice(&(sample.points.len() as u32).to_le_bytes());
    for p in &sample.points {
        put_f32(buf, p.x as f32);
        put_f32(buf, p.y as f32);
        put_f32(buf, p.z as f32);
        buf.push(p.class_id);
    }
    put_f64(buf, sample.gnss.lat);
    put_f64(buf, sample.gnss.lon);
    for axes in [&sample.imu.accel, &sample.imu.gyro, &sample.imu.mag] {
        for &v in axes {
            put_f32(buf, v as f32);
        }
    }
    put_f32(buf, sample.omega_l);
    put_f32(buf, sample.omega_r);
    put_f32(buf, sample.steering);
    put_f32(buf, sample.throttle);
    for &v in &sample.gt_waypoints {
        put_f32(buf, v);
    }
    buf.push(sample.command);
    put_f32(buf, sample.rp1[0]);
    put_f32(buf, sample.rp1[1]);
    put_f32(buf, sample.rp2[0]);
    put_f32(buf, sample.rp2[1]);
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], LogError> {
        if self.pos + n > self.data.len() {
            return Err(LogError::Truncated(what));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, LogError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &'static str) -> Result<f32, LogError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, LogError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, LogError> {
        Ok(self.take(1, what)?[0])
    }
}

fn decode_sample(cur: &mut Cursor) -> Result<LogSample, LogError> {
    let timestamp = cur.f64("timestamp")?;
    let count = cur.u32("point count")? as usize;
    let mut points = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let x = cur.f32("point x")? as f64;
        let y = cur.f32("point y")? as f64;
        let z = cur.f32("point z")? as f64;
        let class_id = cur.u8("point class")?;
        points.push(LabeledPoint { x, y, z, class_id });
    }
    let gnss = GeoPoint { lat: cur.f64("gnss lat")?, lon: cur.f64("gnss lon")? };
    let mut imu = ImuSample { accel: [0.0; 3], gyro: [0.0; 3], mag: [0.0; 3] };
    for axes in [&mut imu.accel, &mut imu.gyro, &mut imu.mag] {
        for v in axes.iter_mut() {
            *v = cur.f32("imu")? as f64;
        }
    }
    let omega_l = cur.f32("omega_l")?;
    let omega_r = cur.f32("omega_r")?;
    let steering = cur.f32("steering")?;
    let throttle = cur.f32("throttle")?;
    let mut gt_waypoints = [0.0f32; 6];
    for v in &mut gt_waypoints {
        *v = cur.f32("waypoint")?;
    }
    let command = cur.u8("command")?;
    let rp1 = [cur.f32("rp1 x")?, cur.f32("rp1 y")?];
    let rp2 = [cur.f32("rp2 x")?, cur.f32("rp2 y")?];
    Ok(LogSample {
        timestamp,
        points,
        gnss,
        imu,
        omega_l,
        omega_r,
        steering,
        throttle,
        gt_waypoints,
        command,
        rp1,
        rp2,
    })
}

pub fn encode_episode_log(samples: &[LogSample]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&LOG_MAGIC);
    buf.extend_from_slice(&LOG_VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for sample in samples {
        encode_sample(sample, &mut buf);
    }
    buf
}

pub fn decode_episode_log(data: &[u8]) -> Result<Vec<LogSample>, LogError> {
    let mut cur = Cursor { data, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if magic != LOG_MAGIC {
        return Err(LogError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(cur.take(2, "version")?.try_into().unwrap());
    if version != LOG_VERSION {
        return Err(LogError::BadVersion(version));
    }
    let count = cur.u32("sample count")? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        samples.push(decode_sample(&mut cur)?);
    }
    if cur.pos != data.len() {
        return Err(LogError::Truncated("trailing bytes after last sample"));
    }
    Ok(samples)
}

pub fn write_episode_log(path: &Path, samples: &[LogSample]) -> Result<(), LogError> {
    let mut writer = BufWriter::new(File::create(path)?);
    writer.write_all(&encode_episode_log(samples))?;
    writer.flush()?;
    Ok(())
}

pub fn read_episode_log(path: &Path) -> Result<Vec<LogSample>, LogError> {
    let mut data = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut data)?;
    decode_episode_log(&data)
}
