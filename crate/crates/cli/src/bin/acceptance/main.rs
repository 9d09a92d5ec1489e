//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion
//! and exits non-zero when any selected criterion fails.
//!
//! The trend criteria train a few hundred small models; expect roughly half
//! an hour on a single core in release mode.

mod gradients;
mod oracles;
mod trends;

use std::path::PathBuf;
use std::time::Instant;

use clap::Parser;

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

#[derive(Parser, Debug)]
#[command(name = "acceptance")]
struct Args {
    /// Run only these criteria (comma separated); all by default.
    #[arg(long, value_delimiter = ',')]
    only: Vec<u8>,
    /// Scratch directory; a fresh temporary directory when omitted.
    #[arg(long)]
    work: Option<PathBuf>,
}

/// Runs the `alfa` binary built next to this one with its output captured,
/// or the same entry point in-process when the binary is missing.
pub fn run_alfa<S: AsRef<str>>(args: &[S]) -> anyhow::Result<i32> {
    let args: Vec<&str> = args.iter().map(AsRef::as_ref).collect();
    let sibling = std::env::current_exe()?.with_file_name(format!("alfa{}", std::env::consts::EXE_SUFFIX));
    if sibling.exists() {
        let out = std::process::Command::new(&sibling).args(&args).output()?;
        Ok(out.status.code().unwrap_or(-1))
    } else {
        Ok(alfa_cli::cli_main(std::iter::once("alfa").chain(args)))
    }
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let args = Args::parse();
    let selected = |n: u8| args.only.is_empty() || args.only.contains(&n);
    let work = args
        .work
        .clone()
        .unwrap_or_else(|| std::env::temp_dir().join(format!("alfa-acceptance-{}", std::process::id())));
    if let Err(e) = std::fs::create_dir_all(&work) {
        eprintln!("cannot create {}: {e}", work.display());
        std::process::exit(2);
    }

    let mut sweep: Option<trends::Sweep> = None;
    let ensure_sweep = |sweep: &mut Option<trends::Sweep>| -> anyhow::Result<()> {
        if sweep.is_none() {
            eprintln!("training the 5-seed sweep ...");
            *sweep = Some(trends::sweep()?);
        }
        Ok(())
    };

    let mut failed = 0;
    for n in 1..=9u8 {
        if !selected(n) {
            continue;
        }
        let start = Instant::now();
        let verdict = match n {
            1 => gradients::criterion(),
            2 => oracles::criterion2(&work),
            3 => oracles::criterion3(),
            4 => ensure_sweep(&mut sweep).map(|_| trends::criterion4(sweep.as_ref().expect("built"))),
            5 => trends::criterion5(),
            6 => ensure_sweep(&mut sweep).and_then(|_| trends::criterion6(sweep.as_ref().expect("built"))),
            7 => ensure_sweep(&mut sweep).map(|_| trends::criterion7(sweep.as_ref().expect("built"))),
            8 => trends::criterion8(&work),
            9 => ensure_sweep(&mut sweep).map(|_| trends::criterion9(sweep.as_ref().expect("built"))),
            _ => unreachable!(),
        };
        let verdict = verdict.unwrap_or_else(|e| Verdict {
            pass: false,
            detail: format!("error: {e:#}"),
        });
        if !verdict.pass {
            failed += 1;
        }
        println!(
            "criterion {n}: {} - {} [{:.1}s]",
            if verdict.pass { "PASS" } else { "FAIL" },
            verdict.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if let Some(s) = &sweep {
        println!("(shared 5-seed sweep took {:.0}s)", s.seconds);
    }
    if args.work.is_none() {
        let _ = std::fs::remove_dir_all(&work);
    }
    std::process::exit(if failed == 0 { 0 } else { 1 });
}
