//! Line-oriented text format for [`NetworkInstance`].
//!
//! ```text
//! relaytopo-instance 1
//! n_devices 2
//! n_beacons 1
//! seed 7
//! pathloss_exponent 3.0
//! ...                      (remaining SystemParams fields, one per line)
//! sink 0.0 0.0
//! device 0 <x> <y>
//! device 1 <x> <y>
//! beacon 0 <x> <y>
//! device_gains 0 <g_00> <g_01> <g_02>
//! device_gains 1 <g_10> <g_11> <g_12>
//! beacon_gains 0 <g_00> <g_01>
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so reading a file
//! back reproduces every field bit for bit. Energies are recomputed on load.

use std::io::{BufRead, Write};

use super::{NetworkInstance, SystemParams};
use crate::error::{Error, Result};

const MAGIC: &str = "relaytopo-instance";
const VERSION: u32 = 1;

pub fn write_instance<W: Write>(inst: &NetworkInstance, mut w: W) -> Result<()> {
    let p = &inst.params;
    writeln!(w, "{MAGIC} {VERSION}")?;
    writeln!(w, "n_devices {}", inst.n_devices())?;
    writeln!(w, "n_beacons {}", inst.n_beacons())?;
    writeln!(w, "seed {}", inst.seed)?;
    for (key, value) in param_fields(p) {
        writeln!(w, "{key} {value:?}")?;
    }
    writeln!(w, "sink {:?} {:?}", 0.0f64, 0.0f64)?;
    for (i, [x, y]) in inst.devices.iter().enumerate() {
        writeln!(w, "device {i} {x:?} {y:?}")?;
    }
    for (i, [x, y]) in inst.beacons.iter().enumerate() {
        writeln!(w, "beacon {i} {x:?} {y:?}")?;
    }
    let n = inst.n_devices();
    for (i, row) in inst.device_gains.chunks(n + 1).enumerate() {
        write_row(&mut w, "device_gains", i, row)?;
    }
    for (i, row) in inst.beacon_gains.chunks(n).enumerate() {
        write_row(&mut w, "beacon_gains", i, row)?;
    }
    Ok(())
}

fn write_row<W: Write>(w: &mut W, tag: &str, i: usize, row: &[f64]) -> Result<()> {
    write!(w, "{tag} {i}")?;
    for g in row {
        write!(w, " {g:?}")?;
    }
    writeln!(w)?;
    Ok(())
}

fn param_fields(p: &SystemParams) -> [(&'static str, f64); 8] {
    [
        ("pathloss_exponent", p.pathloss_exponent),
        ("bandwidth_hz", p.bandwidth_hz),
        ("noise_figure_db", p.noise_figure_db),
        ("pb_power_w", p.pb_power_w),
        ("efficiency", p.efficiency),
        ("frame_s", p.frame_s),
        ("radius", p.radius),
        ("min_distance", p.min_distance),
    ]
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn next_fields(&mut self) -> Result<Vec<String>> {
        loop {
            self.line += 1;
            let raw = self
                .inner
                .next()
                .ok_or_else(|| self.err("unexpected end of file"))??;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            return Ok(trimmed.split_whitespace().map(str::to_owned).collect());
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    /// Reads `<tag> <values...>` and returns the values.
    fn tagged(&mut self, tag: &str, count: usize) -> Result<Vec<String>> {
        let mut f = self.next_fields()?;
        if f.first().map(String::as_str) != Some(tag) {
            return Err(self.err(format!("expected `{tag}`")));
        }
        if f.len() != count + 1 {
            return Err(self.err(format!("`{tag}` expects {count} values, got {}", f.len() - 1)));
        }
        f.remove(0);
        Ok(f)
    }

    fn parse<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse()
            .map_err(|_| self.err(format!("cannot parse `{s}`")))
    }

    fn scalar<T: std::str::FromStr>(&mut self, tag: &str) -> Result<T> {
        let v = self.tagged(tag, 1)?;
        self.parse(&v[0])
    }

    fn indexed_row(&mut self, tag: &str, index: usize, len: usize) -> Result<Vec<f64>> {
        let v = self.tagged(tag, len + 1)?;
        if self.parse::<usize>(&v[0])? != index {
            return Err(self.err(format!("expected `{tag}` index {index}")));
        }
        v[1..].iter().map(|s| self.parse(s)).collect()
    }
}

pub fn read_instance<R: BufRead>(r: R) -> Result<NetworkInstance> {
    let mut lines = Lines {
        inner: r.lines(),
        line: 0,
    };
    let version: u32 = lines.scalar(MAGIC)?;
    if version != VERSION {
        return Err(lines.err(format!("unsupported version {version}")));
    }
    let n: usize = lines.scalar("n_devices")?;
    let nb: usize = lines.scalar("n_beacons")?;
    let seed: u64 = lines.scalar("seed")?;
    let mut params = SystemParams::default();
    {
        let slots: [&mut f64; 8] = [
            &mut params.pathloss_exponent,
            &mut params.bandwidth_hz,
            &mut params.noise_figure_db,
            &mut params.pb_power_w,
            &mut params.efficiency,
            &mut params.frame_s,
            &mut params.radius,
            &mut params.min_distance,
        ];
        let names = param_fields(&SystemParams::default()).map(|(k, _)| k);
        for (slot, name) in slots.into_iter().zip(names) {
            *slot = lines.scalar(name)?;
        }
    }
    let sink = lines.tagged("sink", 2)?;
    if lines.parse::<f64>(&sink[0])? != 0.0 || lines.parse::<f64>(&sink[1])? != 0.0 {
        return Err(lines.err("sink must sit at the origin"));
    }
    let mut point_rows = |tag: &str, count: usize| -> Result<Vec<[f64; 2]>> {
        (0..count)
            .map(|i| {
                let r = lines.indexed_row(tag, i, 2)?;
                Ok([r[0], r[1]])
            })
            .collect()
    };
    let devices = point_rows("device", n)?;
    let beacons = point_rows("beacon", nb)?;
    let mut device_gains = Vec::with_capacity(n * (n + 1));
    for i in 0..n {
        device_gains.extend(lines.indexed_row("device_gains", i, n + 1)?);
    }
    let mut beacon_gains = Vec::with_capacity(nb * n);
    for i in 0..nb {
        beacon_gains.extend(lines.indexed_row("beacon_gains", i, n)?);
    }
    NetworkInstance::from_parts(params, seed, devices, beacons, device_gains, beacon_gains)
}
