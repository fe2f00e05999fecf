use std::path::Path;
use std::process::{Command, Output};

use mx_core::io::{read_f32, read_mxt, write_f32, write_mxt};
use mx_core::{
    dequantize_tensor, mx_gemm, quantize_tensor, ElementFormat, Fp32Tensor, MxTensor, QuantConfig, ScaleE8M0,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;
use tempfile::TempDir;

fn mx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mx")).args(args).output().expect("spawn mx")
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_owned()
}

fn report(out: &Output) -> Value {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().next().expect("one report line");
    serde_json::from_str(line).expect("valid JSON")
}

fn gaussian(seed: u64, shape: Vec<usize>) -> Fp32Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Fp32Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

fn write_input(path: &str, t: &Fp32Tensor) {
    write_f32(Path::new(path), t).unwrap();
}

#[test]
fn quantize_two_by_four_mxfp4() {
    let dir = TempDir::new().unwrap();
    let t = Fp32Tensor::from_rows(&[[0.0, 2.0, 4.0, -6.5], [1.0, -0.5, 0.25, 0.75]]).unwrap();
    write_input(&p(&dir, "in.f32"), &t);
    let out = mx(&["quantize", &p(&dir, "in.f32"), &p(&dir, "q.mxt"), "--format", "mxfp4", "--block-size", "4"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let mt = read_mxt(p(&dir, "q.mxt")).unwrap();
    assert_eq!(mt.axis(), 1);
    assert_eq!(mt.scales().iter().map(|s| s.code).collect::<Vec<_>>(), [127, 125]);
    assert_eq!(mt.codes(), [0x0, 0x4, 0x6, 0xf, 0x6, 0xc, 0x2, 0x5]);

    let line = String::from_utf8_lossy(&out.stdout).into_owned();
    let keys = ["mse", "sqnr_db", "max_abs_err", "max_rel_err", "clamped_lane_count", "nan_block_count"];
    let positions: Vec<usize> = keys.iter().map(|k| line.find(&format!("\"{k}\":")).unwrap()).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]), "{line}");
    let r = report(&out);
    assert_eq!(r.as_object().unwrap().len(), keys.len());
    // only -6.5 moves, to -6
    assert_eq!(r["mse"], 0.25 / 8.0);
    assert_eq!(r["max_abs_err"], 0.5);
    assert_eq!(r["clamped_lane_count"], 1);
    assert_eq!(r["nan_block_count"], 0);
    let signal: f64 = [0.0, 4.0, 16.0, 42.25, 1.0, 0.25, 0.0625, 0.5625].iter().sum::<f64>() / 8.0;
    let expected_sqnr = 10.0 * (signal / (0.25 / 8.0)).log10();
    assert!((r["sqnr_db"].as_f64().unwrap() - expected_sqnr).abs() < 1e-9);

    let out = mx(&["dequantize", &p(&dir, "q.mxt"), &p(&dir, "back.f32")]);
    assert_eq!(out.status.code(), Some(0));
    let back = read_f32(p(&dir, "back.f32")).unwrap();
    assert_eq!(back.shape(), [2, 4]);
    assert_eq!(back.data(), [0.0, 2.0, 4.0, -6.0, 1.0, -0.5, 0.25, 0.75]);
}

#[test]
fn dequantize_matches_library_round_trip() {
    let dir = TempDir::new().unwrap();
    let t = gaussian(3, vec![3, 5, 40]);
    write_input(&p(&dir, "in.f32"), &t);
    for fmt in ElementFormat::ALL {
        let out = mx(&["quantize", &p(&dir, "in.f32"), &p(&dir, "q.mxt"), "--format", fmt.mx_name(), "--axis", "1"]);
        assert_eq!(out.status.code(), Some(0));
        assert_eq!(mx(&["dequantize", &p(&dir, "q.mxt"), &p(&dir, "d.f32")]).status.code(), Some(0));
        let expected = dequantize_tensor(&quantize_tensor(&t, 1, &QuantConfig::new(fmt)).unwrap());
        assert!(read_f32(p(&dir, "d.f32")).unwrap().bit_eq(&expected), "{fmt}");
    }
}

#[test]
fn all_zero_tensor_reports_zero_error() {
    let dir = TempDir::new().unwrap();
    write_input(&p(&dir, "z.f32"), &Fp32Tensor::zeros(vec![4, 64]));
    let out = mx(&["quantize", &p(&dir, "z.f32"), &p(&dir, "z.mxt"), "--format", "mxint8"]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert_eq!(r["mse"], 0.0);
    assert_eq!(r["max_abs_err"], 0.0);
    assert_eq!(r["sqnr_db"], "inf");
}

#[test]
fn usage_errors_exit_one_and_name_the_problem() {
    let dir = TempDir::new().unwrap();
    write_input(&p(&dir, "empty.f32"), &Fp32Tensor::new(vec![2, 0], vec![]).unwrap());
    let out = mx(&["quantize", &p(&dir, "empty.f32"), &p(&dir, "o.mxt"), "--format", "mxfp4"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty dims"));

    write_input(&p(&dir, "in.f32"), &gaussian(1, vec![2, 8]));
    let out = mx(&["quantize", &p(&dir, "in.f32"), &p(&dir, "o.mxt"), "--format", "mxfp9"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--format"));

    let out = mx(&["quantize", &p(&dir, "in.f32"), &p(&dir, "o.mxt"), "--format", "mxfp4", "--block-size", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--block-size"));

    let out = mx(&["quantize", &p(&dir, "in.f32"), &p(&dir, "o.mxt"), "--format", "mxfp4", "--axis", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--axis"));

    let out = mx(&["quantize", &p(&dir, "in.f32"), &p(&dir, "o.mxt"), "--format", "mxfp4", "--rounding", "down"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--rounding"));

    assert_eq!(mx(&[]).status.code(), Some(1));
    assert_eq!(mx(&["--help"]).status.code(), Some(0));
}

#[test]
fn file_errors() {
    let dir = TempDir::new().unwrap();
    std::fs::write(p(&dir, "junk"), b"not a tensor file").unwrap();
    let out = mx(&["quantize", &p(&dir, "junk"), &p(&dir, "o.mxt"), "--format", "mxfp4"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
    assert_eq!(mx(&["dequantize", &p(&dir, "junk"), &p(&dir, "o.f32")]).status.code(), Some(3));

    let t = quantize_tensor(&gaussian(2, vec![4, 8]), 1, &QuantConfig::new(ElementFormat::E4M3)).unwrap();
    write_mxt(p(&dir, "t.mxt"), &t).unwrap();
    let mut bytes = std::fs::read(p(&dir, "t.mxt")).unwrap();
    bytes.pop();
    std::fs::write(p(&dir, "short.mxt"), &bytes).unwrap();
    let out = mx(&["dequantize", &p(&dir, "short.mxt"), &p(&dir, "o.f32")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("elements"));

    let missing = p(&dir, "missing.f32");
    assert_eq!(mx(&["quantize", &missing, &p(&dir, "o.mxt"), "--format", "mxfp4"]).status.code(), Some(2));
}

#[test]
fn nan_scale_blocks_dequantize_to_nan() {
    let dir = TempDir::new().unwrap();
    let cfg = QuantConfig::new(ElementFormat::E2M1).with_block_size(2);
    let mt = MxTensor::from_parts(vec![1, 4], 1, cfg, vec![ScaleE8M0::NAN, ScaleE8M0::ONE], vec![2, 3, 2, 3]).unwrap();
    write_mxt(p(&dir, "n.mxt"), &mt).unwrap();
    assert_eq!(mx(&["dequantize", &p(&dir, "n.mxt"), &p(&dir, "n.f32")]).status.code(), Some(0));
    let d = read_f32(p(&dir, "n.f32")).unwrap();
    assert!(d.data()[0].is_nan() && d.data()[1].is_nan());
    assert_eq!(&d.data()[2..], [1.0, 1.5]);
}

#[test]
fn gemm_identity_and_reference_report() {
    let dir = TempDir::new().unwrap();
    let eye = Fp32Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let b = Fp32Tensor::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.0, -1.0]]).unwrap();
    write_input(&p(&dir, "eye.f32"), &eye);
    write_input(&p(&dir, "b.f32"), &b);
    let out = mx(&["gemm", &p(&dir, "eye.f32"), &p(&dir, "b.f32"), &p(&dir, "c.f32"), "--format", "mxfp4", "--reference"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(read_f32(p(&dir, "c.f32")).unwrap(), b);
    assert_eq!(report(&out)["mse"], 0.0);

    let out = mx(&["gemm", &p(&dir, "eye.f32"), &p(&dir, "b.f32"), &p(&dir, "c.f32")]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());

    let out = mx(&["gemm", &p(&dir, "b.f32"), &p(&dir, "b.f32"), &p(&dir, "c.f32")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gemm_mxint8_matches_library() {
    let dir = TempDir::new().unwrap();
    let a = gaussian(10, vec![8, 64]);
    let b = gaussian(11, vec![64, 8]);
    write_input(&p(&dir, "a.f32"), &a);
    write_input(&p(&dir, "b.f32"), &b);
    let out = mx(&["gemm", &p(&dir, "a.f32"), &p(&dir, "b.f32"), &p(&dir, "c.f32"), "--format", "mxint8"]);
    assert_eq!(out.status.code(), Some(0));
    let cfg = QuantConfig::new(ElementFormat::Int8);
    let expected = mx_gemm(&quantize_tensor(&a, 1, &cfg).unwrap(), &quantize_tensor(&b, 0, &cfg).unwrap()).unwrap();
    assert!(read_f32(p(&dir, "c.f32")).unwrap().bit_eq(&expected));
}

#[test]
fn gemm_mixed_formats_report() {
    let dir = TempDir::new().unwrap();
    write_input(&p(&dir, "a.f32"), &gaussian(20, vec![16, 96]));
    write_input(&p(&dir, "b.f32"), &gaussian(21, vec![96, 12]));
    let args = [
        "gemm",
        &p(&dir, "a.f32"),
        &p(&dir, "b.f32"),
        &p(&dir, "c.f32"),
        "--format-a",
        "mxfp4",
        "--format-b",
        "mxfp6_e3m2",
        "--reference",
    ];
    let first = mx(&args);
    assert_eq!(first.status.code(), Some(0));
    let r = report(&first);
    let sqnr = r["sqnr_db"].as_f64().unwrap();
    assert!(sqnr > 5.0 && sqnr < 30.0, "{sqnr}");
    let c1 = std::fs::read(p(&dir, "c.f32")).unwrap();
    let second = mx(&args);
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(c1, std::fs::read(p(&dir, "c.f32")).unwrap());

    // an fp32 operand passes through unquantized
    let out = mx(&["gemm", &p(&dir, "a.f32"), &p(&dir, "b.f32"), &p(&dir, "c.f32"), "--format", "fp32", "--reference"]);
    assert_eq!(report(&out)["mse"], 0.0);
}

#[test]
fn train_demo_writes_deterministic_csv() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str| {
        let out = mx(&["train-demo", "--steps", "5", "--weight-format", "mxfp4", "--out", &p(&dir, name)]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read_to_string(p(&dir, name)).unwrap()
    };
    let csv = run("a.csv");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss,grad_norm");
    assert_eq!(lines.len(), 6);
    for (i, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[0], i.to_string());
        assert!(fields[1].parse::<f64>().unwrap().is_finite());
    }
    assert_eq!(csv, run("b.csv"));

    let out = mx(&["train-demo", "--weight-format", "fp32", "--act-format", "fp32", "--steps", "3", "--seed", "1", "--out", &p(&dir, "c.csv")]);
    assert_eq!(out.status.code(), Some(0));
    assert_ne!(std::fs::read_to_string(p(&dir, "c.csv")).unwrap(), csv);
}

#[test]
fn quantize_is_deterministic() {
    let dir = TempDir::new().unwrap();
    write_input(&p(&dir, "in.f32"), &gaussian(5, vec![33, 70]));
    let a = mx(&["quantize", &p(&dir, "in.f32"), &p(&dir, "a.mxt"), "--format", "mxfp6_e2m3", "--rounding", "rhaz"]);
    let b = mx(&["quantize", &p(&dir, "in.f32"), &p(&dir, "b.mxt"), "--format", "mxfp6_e2m3", "--rounding", "rhaz"]);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(std::fs::read(p(&dir, "a.mxt")).unwrap(), std::fs::read(p(&dir, "b.mxt")).unwrap());
}
