use std::process::ExitCode;

use clap::Parser;
use v2m_cli::commands::{
    cmd_compare_schedules, cmd_eval, cmd_generate, cmd_make_data, cmd_selftest, cmd_sweep_alpha, cmd_train, RunRow,
};
use v2m_cli::config::merge_config_file;
use v2m_cli::exit::{exit_code, SUCCESS, USAGE};
use v2m_cli::{Cli, Command};

fn print_rows(rows: &[RunRow]) {
    for r in rows {
        println!(
            "{} seed {}: weighted nll {:.4}, first-quartile nll {:.4}, fd {:.3}, kl {:.4}, beat sync {:.3}",
            r.setting, r.seed, r.weighted_nll, r.first_quartile_nll, r.fd, r.kl, r.beat_sync
        );
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::MakeData(a) => {
            cmd_make_data(&a)?;
            println!("wrote {} pairs to {}", a.n, a.out.display());
        }
        Command::Train(a) => {
            let out = cmd_train(&a)?;
            if let (Some(first), Some(last)) = (out.log.first(), out.log.last()) {
                println!("loss {:.4} -> {:.4} over {} steps", first.loss, last.loss, out.log.len());
            }
            if let Some(h) = out.heldout {
                println!("held-out nll {:.4}, weighted {:.4}", h.overall, h.weighted);
            }
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Generate(a) => {
            let dirs = cmd_generate(&a)?;
            println!("generated {} clip(s) under {}", dirs.len(), a.out.display());
        }
        Command::Eval(a) => {
            let r = cmd_eval(&a)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::SweepAlpha(a) => print_rows(&cmd_sweep_alpha(&a)?),
        Command::CompareSchedules(a) => print_rows(&cmd_compare_schedules(&a)?),
        Command::Selftest => {
            cmd_selftest(&mut |c| {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match merge_config_file(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(USAGE as u8);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE as u8 } else { SUCCESS as u8 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
