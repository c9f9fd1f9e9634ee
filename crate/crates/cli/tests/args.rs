use std::ffi::OsString;

use clap::Parser;
use seqmap::{expand_config, parse_grid, parse_points, parse_rect, Cli, Points};
use seqmap_core::model::{PixelCoord, RectRoi};
use seqmap_core::pipeline::{Display, RegMode, SegMode};
use seqmap_core::segmentation::GroupCount;
use seqmap_core::stats::{Bandwidths, FdrMode, Sidedness};

const BASE: &[&str] = &[
    "seqmap", "--seq1", "a.csv", "--seq2", "b.csv", "--scan", "blank", "--nframe", "10", "--nrow", "8", "--ncol", "9",
    "--out", "out",
];

fn args(extra: &[&str]) -> Vec<OsString> {
    BASE.iter().chain(extra).map(OsString::from).collect()
}

fn parse(extra: &[&str]) -> Result<seqmap_core::pipeline::RunConfig, String> {
    let cli = Cli::try_parse_from(args(extra)).map_err(|e| e.to_string())?;
    cli.run.to_config().map_err(|e| e.to_string())
}

#[test]
fn defaults_follow_the_documented_values() {
    let c = parse(&[]).unwrap();
    assert_eq!(c.snm.alpha, 0.05);
    assert_eq!(c.snm.sidedness, Sidedness::TwoSided);
    assert_eq!(c.snm.fdr, FdrMode::PerFrame);
    assert_eq!(c.display, Display::Basic);
    assert_eq!(c.pmap_dim, 2);
    assert_eq!(c.seg, SegMode::Auto { groups: GroupCount::Auto });
    assert_eq!(c.reg, RegMode::Auto);
    assert!(!c.parallel && !c.assume_aligned && !c.preprocessed);
    assert_eq!((c.scan.nframe, c.scan.nrow, c.scan.ncol), (10, 8, 9));
}

#[test]
fn every_flag_reaches_the_run_config() {
    let c = parse(&[
        "--seg", "manual", "--seg-cutoff1", "-1.5", "--seg-cutoff2", "2", "--reg", "manual", "--reg-points",
        "1,2;1,6;2,2;2,7", "--roi1", "0,1,6,7", "--roi2", "1,0,6,7", "--polygon", "0,0;0,5;5,5", "--display", "all",
        "--pmap-dim", "3", "--alpha", "0.1", "--sided", "greater", "--bandwidths", "1,2;3,3", "--fdr", "pooled",
        "--parallel", "--workers", "3", "--assume-aligned", "--seed", "42", "--preprocessed",
    ])
    .unwrap();
    assert_eq!(c.seg, SegMode::Manual { c1: -1.5, c2: 2.0 });
    let p = PixelCoord::new;
    assert_eq!(
        c.reg,
        RegMode::Manual {
            seq1: [p(1.0, 2.0), p(1.0, 6.0)],
            seq2: [p(2.0, 2.0), p(2.0, 7.0)]
        }
    );
    assert_eq!(c.roi1, Some(RectRoi::new(0, 1, 6, 7)));
    assert_eq!(c.roi2, Some(RectRoi::new(1, 0, 6, 7)));
    assert_eq!(c.polygon.as_ref().unwrap().vertices().len(), 3);
    assert_eq!((c.display, c.pmap_dim, c.snm.alpha), (Display::All, 3, 0.1));
    assert_eq!(c.snm.sidedness, Sidedness::GreaterThanZero);
    assert_eq!(c.snm.grid, vec![Bandwidths::new(1.0, 2.0).unwrap(), Bandwidths::new(3.0, 3.0).unwrap()]);
    assert_eq!(c.snm.fdr, FdrMode::Pooled);
    assert_eq!((c.parallel, c.workers, c.assume_aligned, c.seed, c.preprocessed), (true, Some(3), true, 42, true));
    assert_eq!(c.threads(), 3);
}

#[test]
fn inconsistent_modes_are_usage_errors() {
    for bad in [
        &["--seg", "manual", "--seg-cutoff1", "3"][..],
        &["--seg-cutoff1", "3"],
        &["--seg", "manual", "--seg-cutoff1", "1", "--seg-cutoff2", "2", "--seg-groups", "3"],
        &["--reg", "manual"],
        &["--reg", "manual", "--reg-points", "1,1;2,2"],
        &["--reg-points", "1,1;2,2;3,3;4,4"],
        &["--polygon", "1,1;2,2"],
        &["--pmap-dim", "4"],
        &["--sided", "less"],
        &["--roi1", "0,0,0,3"],
        &["--bandwidths", "1,-2"],
        &["--scan", "row"],
    ] {
        assert!(parse(bad).is_err(), "{bad:?} should be rejected");
    }
}

#[test]
fn list_syntax_parses() {
    assert_eq!(
        parse_points(" 1.5, 2 ;3,-4;").unwrap(),
        Points(vec![PixelCoord::new(1.5, 2.0), PixelCoord::new(3.0, -4.0)])
    );
    assert!(parse_points("1,2,3").is_err());
    assert!(parse_points("1,nan").is_err());
    assert_eq!(parse_rect("1, 2, 3, 4").unwrap(), RectRoi::new(1, 2, 3, 4));
    assert!(parse_rect("1,2,3").is_err());
    assert!(parse_rect("-1,2,3,4").is_err());
    assert_eq!(parse_grid("2,2").unwrap().0, vec![Bandwidths::new(2.0, 2.0).unwrap()]);
    assert!(parse_grid(";").is_err());
}

#[test]
fn config_file_supplies_flags_and_command_line_wins() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.conf");
    std::fs::write(
        &path,
        "# comparison settings\nseq1 = x.csv\nseq2 = \"y.csv\"\nscan = blank\nnframe = 4\nnrow = 3\nncol = 3\n\
         out = from_file\nalpha = 0.2\nassume_aligned = true\nparallel = false\nreg-points = -1,2;1,2;1,3;2,3 # trailing\n",
    )
    .unwrap();
    let argv: Vec<OsString> = ["seqmap", "--config", path.to_str().unwrap(), "--alpha", "0.01", "--out", "from_flag"]
        .iter()
        .map(OsString::from)
        .collect();
    let cli = Cli::try_parse_from(expand_config(argv).unwrap()).unwrap();
    let c = cli.run.to_config();
    // reg-points without --reg manual is inconsistent; the file was read.
    assert!(c.is_err());
    let mut run = cli.run.clone();
    run.reg_points = None;
    let c = run.to_config().unwrap();
    assert_eq!(c.file1.to_str(), Some("x.csv"));
    assert_eq!(c.file2.to_str(), Some("y.csv"));
    assert_eq!(c.snm.alpha, 0.01);
    assert_eq!(c.out_dir.to_str(), Some("from_flag"));
    assert!(c.assume_aligned);
    assert!(!c.parallel);
    assert_eq!(c.scan.nframe, 4);
}

#[test]
fn config_file_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cases = ["colour = red\n", "alpha 0.1\n", "parallel = maybe\n", "config = other\n"];
    for text in cases {
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, text).unwrap();
        let argv = vec![OsString::from("seqmap"), OsString::from(format!("--config={}", path.display()))];
        assert!(expand_config(argv).is_err(), "{text:?}");
    }
    let argv = vec![OsString::from("seqmap"), OsString::from("--config"), OsString::from("/no/such/file")];
    assert!(expand_config(argv).is_err());
}

#[test]
fn serve_needs_no_run_flags() {
    let cli = Cli::try_parse_from(["seqmap", "serve", "--port", "0", "--no-ui"]).unwrap();
    assert!(matches!(cli.command, Some(seqmap::Command::Serve(ref s)) if s.no_ui && s.port == 0));
    assert!(Cli::try_parse_from(["seqmap", "serve", "--no-ui", "--ui-dir", "x"]).is_err());
}
