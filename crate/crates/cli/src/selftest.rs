use std::io::{BufRead, BufReader, Read};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::Instant;

use hesplit_core::nn::model::load_checkpoint;
use hesplit_core::nn::Tensor;
use hesplit_core::telemetry::RunReport;

use crate::commands::mode_name;
use crate::{CliError, SelftestArgs};
use hesplit_core::wire::Mode;

/// Client-observable drift allowed between encrypted and plaintext runs.
const HE_TOLERANCE: f64 = 1e-2;

struct Harness {
    exe: PathBuf,
    dir: PathBuf,
    /// Data and training flags shared by every training command.
    common: Vec<String>,
    he_set: String,
}

impl Harness {
    fn client_args(&self, port: u16, mode: Mode) -> Vec<String> {
        let mut args =
            vec!["split-client".to_string(), "--port".into(), port.to_string(), "--mode".into(), mode_name(mode).into()];
        args.extend(self.common.iter().cloned());
        args.extend(["--he-set".into(), self.he_set.clone()]);
        args
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn run(&self, args: &[String]) -> Result<Output, CliError> {
        Command::new(&self.exe)
            .args(args)
            .output()
            .map_err(|e| CliError::validation(format!("cannot run {}: {e}", self.exe.display())))
    }

    fn spawn_server(&self, extra: &[String]) -> Result<(Child, u16), CliError> {
        let mut child = Command::new(&self.exe)
            .args(["split-server", "--port", "0"])
            .args(extra)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| CliError::validation(format!("cannot spawn server: {e}")))?;
        let mut line = String::new();
        let stdout = child.stdout.take().expect("piped stdout");
        let mut reader = BufReader::new(stdout);
        reader.read_line(&mut line).map_err(|e| CliError::validation(e.to_string()))?;
        let port = line
            .trim()
            .rsplit(':')
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| CliError::validation(format!("server did not report its address: {line:?}")))?;
        child.stdout = Some(reader.into_inner());
        Ok((child, port))
    }

    /// One split session; returns client output and server exit status.
    fn session(&self, mode: Mode, tag: &str, server_extra: &[String]) -> Result<(Output, Output), CliError> {
        let mut sargs = vec![
            "--private-seed".to_string(),
            "1".into(),
            "--report".into(),
            self.path(&format!("{tag}_server.json")).display().to_string(),
            "--save-model".into(),
            self.path(&format!("{tag}_server.ckpt")).display().to_string(),
        ];
        sargs.extend_from_slice(server_extra);
        let (server, port) = self.spawn_server(&sargs)?;
        let mut cargs = self.client_args(port, mode);
        cargs.extend([
            "--report".into(),
            self.path(&format!("{tag}_client.json")).display().to_string(),
            "--save-model".into(),
            self.path(&format!("{tag}_client.ckpt")).display().to_string(),
        ]);
        let client = self.run(&cargs)?;
        let server = wait(server)?;
        Ok((client, server))
    }
}

fn wait(mut child: Child) -> Result<Output, CliError> {
    let mut stdout = Vec::new();
    if let Some(mut s) = child.stdout.take() {
        s.read_to_end(&mut stdout).ok();
    }
    let mut out = child.wait_with_output().map_err(|e| CliError::validation(e.to_string()))?;
    stdout.extend(out.stdout);
    out.stdout = stdout;
    Ok(out)
}

fn read_report(path: &Path) -> Result<RunReport, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn read_ckpt(path: &Path) -> Result<Vec<Tensor>, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    load_checkpoint(&bytes).map_err(|e| e.to_string())
}

fn describe(out: &Output) -> String {
    format!("exit {:?}; stderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or(""))
}

fn max_diff(a: &[Tensor], b: &[Tensor]) -> Result<f64, String> {
    if a.len() != b.len() {
        return Err(format!("{} vs {} tensors", a.len(), b.len()));
    }
    a.iter().zip(b).try_fold(0.0f64, |m, (x, y)| Ok(m.max(x.max_abs_diff(y).map_err(|e| e.to_string())?)))
}

fn check_local_vs_plain(h: &Harness) -> Result<String, String> {
    let mut args = vec!["train-local".to_string()];
    args.extend(h.common.iter().cloned());
    args.extend(["--report".into(), h.path("local.json").display().to_string()]);
    args.extend(["--save-model".into(), h.path("local.ckpt").display().to_string()]);
    let local = h.run(&args).map_err(|e| e.message)?;
    if !local.status.success() {
        return Err(format!("train-local failed: {}", describe(&local)));
    }
    let (client, server) = h.session(Mode::Plain, "plain", &[]).map_err(|e| e.message)?;
    if !client.status.success() || !server.status.success() {
        return Err(format!("client {} / server {}", describe(&client), describe(&server)));
    }
    let l = read_report(&h.path("local.json"))?;
    let c = read_report(&h.path("plain_client.json"))?;
    for (a, b) in l.epochs.iter().zip(&c.epochs) {
        if a.loss != b.loss || a.test_accuracy != b.test_accuracy {
            return Err(format!("epoch {}: local loss {} vs split {}", a.epoch, a.loss, b.loss));
        }
    }
    let mut split = read_ckpt(&h.path("plain_client.ckpt"))?;
    split.extend(read_ckpt(&h.path("plain_server.ckpt"))?);
    let diff = max_diff(&read_ckpt(&h.path("local.ckpt"))?, &split)?;
    if diff != 0.0 {
        return Err(format!("weights differ by {diff:e}"));
    }
    Ok(format!("{} epochs bitwise identical", c.epochs.len()))
}

fn check_he_vs_plain(h: &Harness) -> Result<String, String> {
    let (client, server) = h.session(Mode::He, "he", &[]).map_err(|e| e.message)?;
    if !client.status.success() || !server.status.success() {
        return Err(format!("client {} / server {}", describe(&client), describe(&server)));
    }
    let p = read_report(&h.path("plain_client.json"))?;
    let e = read_report(&h.path("he_client.json"))?;
    let loss_diff = p.epochs.iter().zip(&e.epochs).map(|(a, b)| (a.loss - b.loss).abs()).fold(0.0, f64::max);
    let w_diff = max_diff(&read_ckpt(&h.path("plain_client.ckpt"))?, &read_ckpt(&h.path("he_client.ckpt"))?)?;
    let s_diff = max_diff(&read_ckpt(&h.path("plain_server.ckpt"))?, &read_ckpt(&h.path("he_server.ckpt"))?)?;
    if loss_diff > HE_TOLERANCE || w_diff > HE_TOLERANCE || s_diff > HE_TOLERANCE {
        return Err(format!("loss {loss_diff:e}, client weights {w_diff:e}, server weights {s_diff:e}"));
    }
    Ok(format!("max drift: loss {loss_diff:.1e}, client weights {w_diff:.1e}, server weights {s_diff:.1e}"))
}

fn check_he_audit(h: &Harness) -> Result<String, String> {
    let c = read_report(&h.path("he_client.json"))?;
    let audit = c.audit.ok_or("client report has no audit")?;
    let all_hold = audit["assertions"].as_array().is_some_and(|a| a.iter().all(|x| x["holds"] == true));
    if !all_hold {
        return Err(format!("audit failed: {audit}"));
    }
    let s = read_report(&h.path("he_server.json"))?;
    let level: usize = s.config.get("max_ciphertext_level").and_then(|v| v.parse().ok()).ok_or("no level recorded")?;
    if level > 1 {
        return Err(format!("ciphertext reached level {level}"));
    }
    Ok(format!("audit holds, max ciphertext level {level}"))
}

fn check_rejection(h: &Harness) -> Result<String, String> {
    let (client, server) =
        h.session(Mode::Plain, "reject", &["--require-batch-size".into(), "8".into()]).map_err(|e| e.message)?;
    match (client.status.code(), server.status.code()) {
        (Some(1), Some(1)) => Ok("mismatched batch size rejected, exit 1 on both sides".into()),
        (c, s) => Err(format!("expected exit 1/1, got {c:?}/{s:?}")),
    }
}

fn check_unreachable(h: &Harness) -> Result<String, String> {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
        l.local_addr().map_err(|e| e.to_string())?.port()
    };
    let out = h.run(&h.client_args(port, Mode::Plain)).map_err(|e| e.message)?;
    match out.status.code() {
        Some(2) => Ok("connection refused, exit 2".into()),
        c => Err(format!("expected exit 2, got {c:?}")),
    }
}

pub fn selftest(args: SelftestArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let exe = std::env::current_exe().map_err(|e| CliError::validation(e.to_string()))?;
    let dir =
        args.workdir.clone().unwrap_or_else(|| std::env::temp_dir().join(format!("hesplit-selftest-{}", std::process::id())));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::validation(format!("cannot create {}: {e}", dir.display())))?;
    let common: Vec<String> = [
        "--synthetic".to_string(),
        args.samples.to_string(),
        "--epochs".into(),
        args.epochs.to_string(),
        "--batch-size".into(),
        "4".into(),
        "--seed".into(),
        "7".into(),
    ]
    .to_vec();
    let h = Harness { exe, dir: dir.clone(), common, he_set: args.he_set.name().to_string() };

    type Check = fn(&Harness) -> Result<String, String>;
    let checks: [(&str, Check); 5] = [
        ("local equals split-plain", check_local_vs_plain),
        ("split-he tracks split-plain", check_he_vs_plain),
        ("leakage audit and depth", check_he_audit),
        ("parameter mismatch rejected", check_rejection),
        ("unreachable server", check_unreachable),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check(&h) {
            Ok(detail) => println!("[ok]   {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail}");
            }
        }
    }
    println!("selftest finished in {:.1}s", start.elapsed().as_secs_f64());
    if args.workdir.is_none() {
        std::fs::remove_dir_all(&dir).ok();
    }
    if failed > 0 {
        return Err(CliError::validation(format!("{failed} self-test check(s) failed")));
    }
    Ok(())
}
