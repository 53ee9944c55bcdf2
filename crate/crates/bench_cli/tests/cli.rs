use std::process::{Command, Output};

use fla_core::blocks::{save_checkpoint, BlockKind, BlockParams};
use fla_core::tensor::{write_file, DType, Rng};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bench_cli")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn verify_passes_and_fault_injection_fails() {
    let ok = bench(&["verify", "--seed", "3", "--cases", "10", "--format", "human"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    let text = stdout(&ok);
    assert_eq!(text.lines().filter(|l| l.starts_with("suite=")).count(), 6);
    assert!(text.ends_with("overall status=pass seed=3 suites=6\n"));

    let bad = bench(&["verify", "--seed", "3", "--cases", "10", "--inject-fault", "softmax-axis"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stdout(&bad).contains("stochasticity,fail"));
}

#[test]
fn cost_grid_has_one_row_per_kind_and_shape() {
    let args = ["cost", "--shape", "64x16x16", "--shape", "64x32x32", "--shape", "128x16x16"];
    let out = bench(&args);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 16);
    assert!(text.starts_with("kind,C,H,W,r,flops_total,"));
    assert!(!text.contains('\r'));

    let serial = Command::new(env!("CARGO_BIN_EXE_bench_cli"))
        .args(args)
        .env("FLA_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(serial.stdout, out.stdout);
}

#[test]
fn table4_rows_and_ratio() {
    let out = bench(&["table4", "--reps", "1", "--timing-shape", "8x4x4"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["kind", "gflops", "attn_elements", "activation_mb", "timing_shape", "wall_ms"]);
    assert_eq!(rows.len(), 7);
    assert_eq!(rows[1][..2], ["channel_nl", "9.66"]);
    let ratio = rows.last().unwrap();
    assert_eq!(ratio[0], "fla/dual");
    assert!(ratio[1].parse::<f64>().unwrap() <= 0.18);

    let empty = bench(&["table4", "--kind", ""]);
    assert_eq!(empty.status.code(), Some(0));
    assert_eq!(stdout(&empty), "kind,gflops,attn_elements,activation_mb,timing_shape,wall_ms\n");
}

#[test]
fn zero_gamma_forward_copies_the_input_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(1);
    for (kind, dtype) in [(BlockKind::Fla, DType::F32), (BlockKind::SpatialNl, DType::F64)] {
        let params = BlockParams::random(kind, 4, 2, &mut rng).unwrap().with_all_gammas(0.0);
        let ckpt = dir.path().join(format!("{kind}-params"));
        save_checkpoint(&ckpt, &params, DType::F64).unwrap();
        let input = dir.path().join(format!("{kind}-in.flt1"));
        write_file(&input, &rng.uniform_tensor(&[4, 3, 5], -1.0, 1.0).unwrap(), dtype).unwrap();
        let output = dir.path().join(format!("{kind}-out.flt1"));
        let out = bench(&[
            "forward",
            "--params",
            ckpt.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
            "--output",
            output.to_str().unwrap(),
            "--reps",
            "1",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(std::fs::read(&output).unwrap(), std::fs::read(&input).unwrap());
    }
}

#[test]
fn malformed_input_names_the_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.flt1");
    std::fs::write(&path, [0x46, 0x4C, 0x54, 0x31, 1, 1, 9, 0]).unwrap();
    let out = bench(&["forward", "--input", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("byte offset 6"), "{err}");

    let missing = bench(&["forward", "--input", dir.path().join("nope").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(4));
}

#[test]
fn usage_errors_exit_3() {
    for args in [
        &["cost", "--bogus"][..],
        &["cost", "--shape", "4x4"],
        &["forward", "--reps", "0"],
        &["nonsense"],
        &["cost", "--kind", "bogus"],
        &["cost", "--shape", "12x4x4", "--reduction", "5"],
    ] {
        assert_eq!(bench(args).status.code(), Some(3), "{args:?}");
    }
    let env = Command::new(env!("CARGO_BIN_EXE_bench_cli"))
        .args(["cost"])
        .env("FLA_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(env.status.code(), Some(3));
}

#[test]
fn gradcheck_reports_small_errors() {
    let out = bench(&["gradcheck", "--kind", "fla", "--shape", "4x3x3", "--seed", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "fla");
    assert!(row[5].parse::<f64>().unwrap() < 1e-5);
    assert_eq!(row[8], "pass");
}

#[test]
fn train_writes_a_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let curve = dir.path().join("loss.csv");
    let out = bench(&["train", "--steps", "30", "--shape", "4x3x3", "--out", curve.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&curve).unwrap();
    assert!(text.starts_with("step,loss\n0,"));
    assert_eq!(text.lines().count(), 32);

    let again = bench(&["train", "--steps", "30", "--shape", "4x3x3"]);
    assert_eq!(stdout(&again), text);

    let diverged = bench(&["train", "--steps", "50", "--lr", "1e9", "--kind", "spatial_nl", "--task", "spatial_mix"]);
    assert_eq!(diverged.status.code(), Some(2));
    assert!(stdout(&diverged).starts_with("step,loss\n"));
}
