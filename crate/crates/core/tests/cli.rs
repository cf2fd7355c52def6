use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mcnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn end_to_end_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    write(
        &d.join("gen.cfg"),
        &format!(
            "# tiny set\nseed = 3\ntrain_count = 12\nval_count = 2\ntest_count = 3\nlarge_count = 1\nsize = 32\nlarge_size = 48\nlabeled_fraction = 0.25\nroot = {}\n",
            data.display()
        ),
    );
    let out = mcnet(&["gen-data", "--config", p(&d.join("gen.cfg"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.txt").exists());

    let ckpt = d.join("m.mcnf");
    let train_cfg = format!(
        "dataset = {}\niterations = 4\nbase_width = 4\ndepth = 2\neval_every = 2\ncheckpoint = {}\n",
        data.display(),
        ckpt.display()
    );
    write(&d.join("train.cfg"), &train_cfg);
    let out = mcnet(&["train", "--config", p(&d.join("train.cfg")), "--no-detach"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let runlog = fs::read_to_string(d.join("m.runlog.csv")).unwrap();
    assert!(runlog.starts_with("iter,l_seg_1,l_seg_2,l_seg_3,l_mc,beta,total\n"));
    assert_eq!(runlog.lines().count(), 5);

    let csv = d.join("test.csv");
    let out = mcnet(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "test", "--out", p(&csv)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().last().unwrap().starts_with("mean,"));

    let image = data.join("large_0000.img.pgm");
    let prob = d.join("prob.pgm");
    let out = mcnet(&["infer", "--checkpoint", p(&ckpt), "--image", p(&image), "--out", p(&prob), "--patch", "32", "--stride", "16"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let pgm = mcnet::pgm::Pgm::read(&prob).unwrap();
    assert_eq!((pgm.width, pgm.height, pgm.maxval), (48, 48, 65535));

    let heat = d.join("u.pgm");
    let out = mcnet(&["uncertainty", "--checkpoint", p(&ckpt), "--image", p(&data.join("val_0000.img.pgm")), "--out", p(&heat)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("u.range.txt").exists());

    let table = d.join("abl.csv");
    let out = mcnet(&["ablate", "--config", p(&d.join("train.cfg")), "--axis", "T", "--values", "0.1,1.0", "--out", p(&table)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&table).unwrap().lines().count(), 3);

    // configuration errors
    write(&d.join("bad.cfg"), "iterations = 3\nlearning_rate = 0.1\n");
    assert_eq!(code(&mcnet(&["train", "--config", p(&d.join("bad.cfg"))])), 2);
    assert_eq!(code(&mcnet(&["ablate", "--config", p(&d.join("train.cfg")), "--axis", "depth", "--values", "1", "--out", p(&table)])), 2);
    assert_eq!(code(&mcnet(&["infer", "--checkpoint", p(&ckpt), "--image", p(&image), "--out", p(&prob), "--patch", "16", "--stride", "17"])), 2);
    assert_eq!(code(&mcnet(&["uncertainty", "--checkpoint", p(&ckpt), "--image", p(&image), "--out", p(&heat), "--statistic", "median"])), 2);
    assert_eq!(code(&mcnet(&["frobnicate"])), 2);

    // data and format errors
    write(&d.join("junk.mcnf"), "not a checkpoint");
    assert_eq!(code(&mcnet(&["eval", "--checkpoint", p(&d.join("junk.mcnf")), "--data", p(&data), "--split", "test", "--out", p(&csv)])), 3);
    assert_eq!(code(&mcnet(&["eval", "--checkpoint", p(&ckpt), "--data", p(&d.join("missing")), "--split", "test", "--out", p(&csv)])), 3);

    // numerical failure
    let nan_cfg = format!("{train_cfg}lr = 1e30\n");
    write(&d.join("nan.cfg"), &nan_cfg);
    let out = mcnet(&["train", "--config", p(&d.join("nan.cfg"))]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}
