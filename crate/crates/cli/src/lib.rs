//! Command-line front end for `skipabsorb-core`.
//!
//! Exit codes: 0 pass/found, 1 fail/none, 2 usage or input error. Reports
//! are JSON on stdout unless redirected; diagnostics go to stderr.

pub mod commands;
pub mod files;

use std::ffi::OsString;
use std::io::Write;

use clap::error::ErrorKind;
use clap::Parser;

use crate::commands::{execute, Cli};
use crate::files::{to_json, write_json, ReportFile, SCHEMA_VERSION};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Runs the CLI on `args` (including the program name).
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = write!(out, "{e}");
            return EXIT_PASS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            let _ = writeln!(err, "{}", one_line(first));
            return EXIT_ERROR;
        }
    };
    let command = args
        .get(1)
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let echo = args
        .iter()
        .skip(2)
        .map(|s| s.to_string_lossy().into_owned())
        .collect();
    let result = execute(cli.command).and_then(|o| {
        let report = ReportFile {
            schema_version: SCHEMA_VERSION,
            command,
            args: echo,
            seed: o.seed,
            tolerances: o.tolerances,
            passed: o.passed,
            result: o.result,
        };
        match &o.report_path {
            Some(path) => write_json(path, &report)?,
            None => out.write_all(to_json(&report)?.as_bytes())?,
        }
        Ok(report.passed)
    });
    match result {
        Ok(true) => EXIT_PASS,
        Ok(false) => EXIT_FAIL,
        Err(e) => {
            let _ = writeln!(err, "error: {}", one_line(&format!("{e:#}")));
            EXIT_ERROR
        }
    }
}
