//! Plain-text network serialization.
//!
//! The format is line-oriented and self-describing: a key-value header
//! (network kind, mode, layer count, widths, output shift) followed by one
//! block per layer with named row-major weight matrices. Floats are written
//! with Rust's shortest-round-trip formatting, so **save → load → save
//! reproduces the file byte for byte** and loaded weights are bit-identical
//! to the saved ones. That stability is contractual; the exact byte layout
//! beyond it is not.
//!
//! Gate activations of the partially-convex variant are implied by the mode
//! (ReLU in `mpc`, pass-through in `amos`) and are therefore not stored.

use std::fmt::Write as _;

use super::picnn::gate_activations;
use super::{FicnnLayer, FicnnParams, IcnnError, IcnnParams, Mode, PicnnLayer, PicnnParams};
use crate::activation::Activation;
use crate::linalg::Mat;

pub fn write_params(out: &mut String, params: &IcnnParams) -> Result<(), IcnnError> {
    params.validate()?;
    check_finite(params)?;
    match params {
        IcnnParams::Ficnn(p) => write_ficnn(out, p),
        IcnnParams::Picnn(p) => write_picnn(out, p),
    }
    Ok(())
}

pub fn read_params(reader: &mut LineReader) -> Result<IcnnParams, IcnnError> {
    let kind = reader.expect_key("network")?;
    let params = match kind.as_str() {
        "ficnn" => IcnnParams::Ficnn(read_ficnn(reader)?),
        "picnn" => IcnnParams::Picnn(read_picnn(reader)?),
        other => return Err(reader.invalid(format!("unknown network kind `{other}`"))),
    };
    params.validate()?;
    Ok(params)
}

fn write_ficnn(out: &mut String, p: &FicnnParams) {
    writeln!(out, "network ficnn").unwrap();
    writeln!(out, "mode {}", mode_str(p.mode)).unwrap();
    writeln!(out, "input-dim {}", p.input_dim).unwrap();
    writeln!(out, "widths {}", join_usize(&p.widths())).unwrap();
    if let Some(beta) = output_shift(p.layers.last().map(|l| l.g)) {
        writeln!(out, "beta {beta}").unwrap();
    }
    for (i, layer) in p.layers.iter().enumerate() {
        writeln!(out, "layer {i}").unwrap();
        writeln!(out, "g {}", act_str(layer.g)).unwrap();
        if let Some(wz) = &layer.wz {
            write_mat(out, "wz", wz);
        }
        write_mat(out, "wy", &layer.wy);
        write_vec(out, "b", &layer.b);
    }
    writeln!(out, "end network").unwrap();
}

fn read_ficnn(r: &mut LineReader) -> Result<FicnnParams, IcnnError> {
    let mode = parse_mode(&r.expect_key("mode")?, r)?;
    let input_dim: usize = r.parse_key("input-dim")?;
    let widths = parse_usizes(&r.expect_key("widths")?, r)?;
    let mut peek = r.next_content()?;
    if peek.starts_with("beta ") {
        peek = r.next_content()?; // informational; the output activation carries it
    }
    let mut layers = Vec::with_capacity(widths.len());
    for (i, _) in widths.iter().enumerate() {
        if peek != format!("layer {i}") {
            return Err(r.invalid(format!("expected `layer {i}`, found `{peek}`")));
        }
        let g = parse_act(&r.expect_key("g")?, r)?;
        let wz = if i > 0 { Some(read_mat(r, "wz")?) } else { None };
        let wy = read_mat(r, "wy")?;
        let b = read_vec(r, "b")?;
        layers.push(FicnnLayer { wz, wy, b, g });
        peek = r.next_content()?;
    }
    if peek != "end network" {
        return Err(r.invalid(format!("expected `end network`, found `{peek}`")));
    }
    Ok(FicnnParams { mode, input_dim, layers })
}

fn write_picnn(out: &mut String, p: &PicnnParams) {
    writeln!(out, "network picnn").unwrap();
    writeln!(out, "mode {}", mode_str(p.mode)).unwrap();
    writeln!(out, "y-dim {}", p.y_dim).unwrap();
    writeln!(out, "ytilde-dim {}", p.ytilde_dim).unwrap();
    writeln!(out, "widths {}", join_usize(&p.widths())).unwrap();
    writeln!(out, "v-widths {}", join_usize(&p.v_widths())).unwrap();
    if let Some(beta) = output_shift(p.layers.last().map(|l| l.g)) {
        writeln!(out, "beta {beta}").unwrap();
    }
    for (i, layer) in p.layers.iter().enumerate() {
        writeln!(out, "layer {i}").unwrap();
        writeln!(out, "g {}", act_str(layer.g)).unwrap();
        writeln!(out, "g-tilde {}", act_str(layer.g_tilde)).unwrap();
        if let (Some(wt), Some(bt)) = (&layer.w_tilde, &layer.b_tilde) {
            write_mat(out, "w-tilde", wt);
            write_vec(out, "b-tilde", bt);
        }
        if let (Some(wz), Some(wzv), Some(bz)) = (&layer.wz, &layer.wzv, &layer.bz) {
            write_mat(out, "wz", wz);
            write_mat(out, "wzv", wzv);
            write_vec(out, "bz", bz);
        }
        write_mat(out, "wy", &layer.wy);
        write_mat(out, "wyv", &layer.wyv);
        write_vec(out, "by", &layer.by);
        write_mat(out, "wv", &layer.wv);
        write_vec(out, "b", &layer.b);
    }
    writeln!(out, "end network").unwrap();
}

fn read_picnn(r: &mut LineReader) -> Result<PicnnParams, IcnnError> {
    let mode = parse_mode(&r.expect_key("mode")?, r)?;
    let y_dim: usize = r.parse_key("y-dim")?;
    let ytilde_dim: usize = r.parse_key("ytilde-dim")?;
    let widths = parse_usizes(&r.expect_key("widths")?, r)?;
    let _v_widths = parse_usizes(&r.expect_key("v-widths")?, r)?;
    let mut peek = r.next_content()?;
    if peek.starts_with("beta ") {
        peek = r.next_content()?;
    }
    let (g_zv, g_yv) = gate_activations(mode);
    let last = widths.len().saturating_sub(1);
    let mut layers = Vec::with_capacity(widths.len());
    for i in 0..widths.len() {
        if peek != format!("layer {i}") {
            return Err(r.invalid(format!("expected `layer {i}`, found `{peek}`")));
        }
        let g = parse_act(&r.expect_key("g")?, r)?;
        let g_tilde = parse_act(&r.expect_key("g-tilde")?, r)?;
        let (w_tilde, b_tilde) = if i < last {
            (Some(read_mat(r, "w-tilde")?), Some(read_vec(r, "b-tilde")?))
        } else {
            (None, None)
        };
        let (wz, wzv, bz) = if i > 0 {
            (Some(read_mat(r, "wz")?), Some(read_mat(r, "wzv")?), Some(read_vec(r, "bz")?))
        } else {
            (None, None, None)
        };
        let wy = read_mat(r, "wy")?;
        let wyv = read_mat(r, "wyv")?;
        let by = read_vec(r, "by")?;
        let wv = read_mat(r, "wv")?;
        let b = read_vec(r, "b")?;
        layers.push(PicnnLayer {
            w_tilde,
            b_tilde,
            g_tilde,
            wz,
            wzv,
            bz,
            wy,
            wyv,
            by,
            wv,
            b,
            g,
            g_zv,
            g_yv,
        });
        peek = r.next_content()?;
    }
    if peek != "end network" {
        return Err(r.invalid(format!("expected `end network`, found `{peek}`")));
    }
    Ok(PicnnParams { mode, y_dim, ytilde_dim, layers })
}

// ---- primitive helpers ----------------------------------------------------

/// Cursor over the lines of a model file, tracking position for errors.
pub struct LineReader<'a> {
    lines: std::str::Lines<'a>,
    lineno: usize,
}

impl<'a> LineReader<'a> {
    pub fn new(text: &'a str) -> Self {
        LineReader { lines: text.lines(), lineno: 0 }
    }

    /// Next non-empty line, trimmed.
    pub fn next_content(&mut self) -> Result<String, IcnnError> {
        for line in self.lines.by_ref() {
            self.lineno += 1;
            let t = line.trim();
            if !t.is_empty() {
                return Ok(t.to_string());
            }
        }
        Err(IcnnError::Format("unexpected end of file".into()))
    }

    /// Next line must start with `key `; returns the remainder.
    pub fn expect_key(&mut self, key: &str) -> Result<String, IcnnError> {
        let line = self.next_content()?;
        match line.strip_prefix(key) {
            Some(rest) if rest.is_empty() => Ok(String::new()),
            Some(rest) if rest.starts_with(' ') => Ok(rest.trim().to_string()),
            _ => Err(self.invalid(format!("expected `{key} …`, found `{line}`"))),
        }
    }

    pub fn parse_key<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, IcnnError> {
        let v = self.expect_key(key)?;
        v.parse().map_err(|_| self.invalid(format!("cannot parse `{v}` for `{key}`")))
    }

    pub fn invalid(&self, what: String) -> IcnnError {
        IcnnError::Format(format!("line {}: {}", self.lineno, what))
    }
}

pub fn write_mat(out: &mut String, name: &str, m: &Mat) {
    writeln!(out, "{name} {} {}", m.rows(), m.cols()).unwrap();
    for r in 0..m.rows() {
        let row = &m.data()[r * m.cols()..(r + 1) * m.cols()];
        writeln!(out, "{}", join_floats(row)).unwrap();
    }
}

pub fn read_mat(r: &mut LineReader, name: &str) -> Result<Mat, IcnnError> {
    let dims = r.expect_key(name)?;
    let dims = parse_usizes(&dims, r)?;
    if dims.len() != 2 {
        return Err(r.invalid(format!("`{name}` needs rows and cols")));
    }
    let (rows, cols) = (dims[0], dims[1]);
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let line = r.next_content()?;
        let vals = parse_floats(&line, r)?;
        if vals.len() != cols {
            return Err(r.invalid(format!("`{name}` row has {} values, expected {cols}", vals.len())));
        }
        data.extend_from_slice(&vals);
    }
    Ok(Mat::from_vec(rows, cols, data))
}

pub fn write_vec(out: &mut String, name: &str, v: &[f64]) {
    writeln!(out, "{name} {}", v.len()).unwrap();
    writeln!(out, "{}", join_floats(v)).unwrap();
}

pub fn read_vec(r: &mut LineReader, name: &str) -> Result<Vec<f64>, IcnnError> {
    let n: usize = r.parse_key(name)?;
    let line = r.next_content()?;
    let vals = parse_floats(&line, r)?;
    if vals.len() != n {
        return Err(r.invalid(format!("`{name}` has {} values, expected {n}", vals.len())));
    }
    Ok(vals)
}

/// Shortest-round-trip decimal formatting, space separated. An empty slice
/// renders as an empty string (and parses back as such).
pub fn join_floats(xs: &[f64]) -> String {
    let mut s = String::new();
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{x}").unwrap();
    }
    s
}

pub fn parse_floats(line: &str, r: &LineReader) -> Result<Vec<f64>, IcnnError> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| r.invalid(format!("bad float `{t}`"))))
        .collect()
}

fn parse_usizes(line: &str, r: &LineReader) -> Result<Vec<usize>, IcnnError> {
    line.split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| r.invalid(format!("bad integer `{t}`"))))
        .collect()
}

fn join_usize(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn mode_str(mode: Mode) -> &'static str {
    match mode {
        Mode::Amos => "amos",
        Mode::Mpc => "mpc",
    }
}

pub fn parse_mode(s: &str, r: &LineReader) -> Result<Mode, IcnnError> {
    match s {
        "amos" => Ok(Mode::Amos),
        "mpc" => Ok(Mode::Mpc),
        other => Err(r.invalid(format!("unknown mode `{other}`"))),
    }
}

fn act_str(a: Activation) -> String {
    match a {
        Activation::Relu => "relu".into(),
        Activation::Identity => "identity".into(),
        Activation::ShiftedRelu(beta) => format!("shifted-relu {beta}"),
    }
}

fn parse_act(s: &str, r: &LineReader) -> Result<Activation, IcnnError> {
    if s == "relu" {
        return Ok(Activation::Relu);
    }
    if s == "identity" {
        return Ok(Activation::Identity);
    }
    if let Some(rest) = s.strip_prefix("shifted-relu ") {
        let beta: f64 =
            rest.trim().parse().map_err(|_| r.invalid(format!("bad shift `{rest}`")))?;
        return Ok(Activation::ShiftedRelu(beta));
    }
    Err(r.invalid(format!("unknown activation `{s}`")))
}

fn output_shift(g: Option<Activation>) -> Option<f64> {
    match g {
        Some(Activation::ShiftedRelu(beta)) => Some(beta),
        _ => None,
    }
}

fn check_finite(params: &IcnnParams) -> Result<(), IcnnError> {
    if params.flatten().iter().any(|v| !v.is_finite()) {
        return Err(IcnnError::NonFinite("network weights".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_ficnn(seed: u64, mode: Mode) -> IcnnParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        IcnnParams::Ficnn(FicnnParams::init(
            mode,
            11,
            &[9, 9, 9, 1],
            Activation::Relu,
            Activation::ShiftedRelu(0.8),
            &mut rng,
        ))
    }

    fn random_picnn(seed: u64, mode: Mode) -> IcnnParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        IcnnParams::Picnn(PicnnParams::init(
            mode,
            5,
            6,
            &[8, 8, 8, 1],
            &[8, 8, 8],
            Activation::Relu,
            Activation::ShiftedRelu(12.0),
            &mut rng,
        ))
    }

    #[test]
    fn round_trip_is_bit_stable() {
        for params in [
            random_ficnn(3, Mode::Mpc),
            random_ficnn(4, Mode::Amos),
            random_picnn(5, Mode::Mpc),
            random_picnn(6, Mode::Amos),
        ] {
            let mut text = String::new();
            write_params(&mut text, &params).unwrap();
            let loaded = read_params(&mut LineReader::new(&text)).unwrap();
            assert_eq!(params, loaded, "weights must round-trip bit-identically");
            let mut again = String::new();
            write_params(&mut again, &loaded).unwrap();
            assert_eq!(text, again, "re-serialisation must reproduce the bytes");
        }
    }

    #[test]
    fn non_finite_weights_are_rejected() {
        let mut params = random_ficnn(7, Mode::Mpc);
        if let IcnnParams::Ficnn(p) = &mut params {
            p.layers[0].b[0] = f64::NAN;
        }
        let mut text = String::new();
        assert!(matches!(write_params(&mut text, &params), Err(IcnnError::NonFinite(_))));
    }

    #[test]
    fn truncated_file_is_an_error_not_a_panic() {
        let mut text = String::new();
        write_params(&mut text, &random_ficnn(8, Mode::Mpc)).unwrap();
        let cut = &text[..text.len() / 2];
        let last_nl = cut.rfind('\n').unwrap();
        assert!(read_params(&mut LineReader::new(&cut[..last_nl])).is_err());
    }
}
