use std::fs;
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::path::Path;

use hesplit_core::attack::{
    check_applicable, export_chunks, run_attack, simulate_prior_protocol_leak, AttackError, DEFAULT_CHUNK,
};
use hesplit_core::data::{batches, load_csv, split_train_test, synth_ecg, Dataset};
use hesplit_core::nn::model::save_checkpoint;
use hesplit_core::nn::{ClientModel, LinearLayer, ModelSpec, Tensor, TrainConfig};
use hesplit_core::split::{client_run, contents, local_train, server_run, ClientOptions, LeakageAudit, ServerOptions};
use hesplit_core::telemetry::{ReportFormat, RunReport};
use hesplit_core::wire::{Mode, MsgType, SyncPolicy};

use crate::{AttackArgs, CliError, ClientArgs, DataArgs, OutputArgs, ServerArgs, TrainArgs, TrainLocalArgs};

const DEFAULT_SYNTHETIC: usize = 2000;

pub struct Prepared {
    pub spec: ModelSpec,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn prepare_data(args: &DataArgs, seed: u64) -> Result<Prepared, CliError> {
    let profile = args.profile;
    let ds = match &args.data {
        Some(path) => load_csv(path, profile)?,
        None => synth_ecg(args.synthetic.unwrap_or(DEFAULT_SYNTHETIC), profile, seed),
    };
    if !(0.0..=1.0).contains(&args.train_ratio) {
        return Err(CliError::validation(format!("train ratio {} is outside [0, 1]", args.train_ratio)));
    }
    let (train, test) = split_train_test(&ds, args.train_ratio, seed)?;
    let spec = ModelSpec::default_cnn(profile.channels(), profile.length(), args.conv_channels, profile.classes())?;
    Ok(Prepared { spec, train, test })
}

pub fn train_config(args: &TrainArgs, train_len: usize) -> Result<TrainConfig, CliError> {
    if args.batch_size == 0 {
        return Err(CliError::validation("batch size must be positive"));
    }
    let available = train_len / args.batch_size;
    let batches = args.batches.unwrap_or(available);
    if batches == 0 || batches > available {
        return Err(CliError::validation(format!(
            "{batches} batches of {} requested, the training split of {train_len} samples yields {available}",
            args.batch_size
        )));
    }
    let cfg = TrainConfig { epochs: args.epochs, lr: args.lr, batch_size: args.batch_size, batches, seed: args.seed };
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_report(report: &RunReport, path: &Path) -> Result<(), CliError> {
    report
        .write(path, ReportFormat::from_path(path))
        .map_err(|e| CliError::validation(format!("cannot write report {}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::validation(format!("cannot write {}: {e}", path.display())))
}

fn finish_outputs(report: &RunReport, output: &OutputArgs, tensors: &[&Tensor]) -> Result<(), CliError> {
    if let Some(path) = &output.report {
        write_report(report, path)?;
    }
    if let Some(path) = &output.save_model {
        write_bytes(path, &save_checkpoint(tensors))?;
    }
    Ok(())
}

fn print_epochs(report: &RunReport) {
    for row in &report.epochs {
        let test = row.test_accuracy.map(|a| format!("{:.2}%", a * 100.0)).unwrap_or_else(|| "-".into());
        println!(
            "epoch {:>3}  loss {:.5}  train {:.2}%  test {test}  {:.1}s  {:.2} MiB",
            row.epoch + 1,
            row.loss,
            row.train_accuracy * 100.0,
            row.seconds,
            row.bytes_total() as f64 / (1024.0 * 1024.0)
        );
    }
}

pub fn train_local(args: TrainLocalArgs) -> Result<(), CliError> {
    let data = prepare_data(&args.data, args.train.seed)?;
    let cfg = train_config(&args.train, data.train.len())?;
    let out = local_train(&data.spec, &cfg, &data.train, Some(&data.test), args.output.keep_iterations)?;
    print_epochs(&out.report);
    let mut tensors = out.client.tensors();
    tensors.extend([&out.server.w, &out.server.b]);
    finish_outputs(&out.report, &args.output, &tensors)
}

pub fn split_server(args: ServerArgs) -> Result<(), CliError> {
    let listener = TcpListener::bind((args.host.as_str(), args.port))
        .map_err(|e| CliError { code: 2, message: format!("cannot listen on {}:{}: {e}", args.host, args.port) })?;
    let addr = listener.local_addr().map_err(|e| CliError { code: 2, message: e.to_string() })?;
    // first stdout line; the self-test reads the port from it
    println!("listening on {addr}");
    std::io::stdout().flush().ok();
    let (stream, peer) = listener.accept().map_err(|e| CliError { code: 2, message: e.to_string() })?;
    stream.set_nodelay(true).ok();
    eprintln!("session with {peer}");
    let opts = ServerOptions {
        policy: SyncPolicy {
            mode: args.require_mode,
            he_set: args.require_he_set,
            batch_size: args.require_batch_size,
            ..Default::default()
        },
        record_weights: false,
        private_seed: args.private_seed,
    };
    let out = server_run(stream, &opts)?;
    println!(
        "served {} epochs, {:.2} MiB, max ciphertext level {}",
        out.report.epochs.len(),
        out.report.totals.bytes_sent.saturating_add(out.report.totals.bytes_received) as f64 / (1024.0 * 1024.0),
        out.max_level
    );
    if let Some(path) = &args.report {
        write_report(&out.report, path)?;
    }
    if let Some(path) = &args.save_model {
        write_bytes(path, &save_checkpoint(&[&out.layer.w, &out.layer.b]))?;
    }
    Ok(())
}

pub fn split_client(args: ClientArgs) -> Result<(), CliError> {
    let data = prepare_data(&args.data, args.train.seed)?;
    let cfg = train_config(&args.train, data.train.len())?;
    let mut opts = ClientOptions::new(args.mode, args.he_set, cfg.clone());
    opts.refresh_every = args.refresh_every;
    opts.encryption = args.encryption;
    opts.debug_send_grad_w = args.debug_send_grad_w;
    opts.keep_iterations = args.output.keep_iterations;
    let model = ClientModel::init(&data.spec, cfg.seed)?;
    let stream = TcpStream::connect((args.host.as_str(), args.port))
        .map_err(|e| CliError { code: 2, message: format!("cannot connect to {}:{}: {e}", args.host, args.port) })?;
    stream.set_nodelay(true).ok();
    let out = client_run(stream, model, &data.train, Some(&data.test), &opts)?;
    print_epochs(&out.report);
    for a in &out.audit.assertions {
        let verdict = match (a.holds, a.exposed_by_design) {
            (true, _) => "holds",
            (false, true) => "exposed by design",
            (false, false) => "VIOLATED",
        };
        println!("audit ({}) {}: {verdict}", a.id, a.statement);
    }
    finish_outputs(&out.report, &args.output, &out.model.tensors())
}

pub fn attack_demo(args: AttackArgs) -> Result<(), CliError> {
    let data = prepare_data(&args.data, args.seed)?;
    let classes = data.spec.classes();
    if args.batch != classes {
        return Err(CliError::validation(AttackError::Shape { batch: args.batch, classes }.to_string()));
    }
    let (client, server) = if args.train_epochs == 0 {
        (ClientModel::init(&data.spec, args.seed)?, LinearLayer::init(&data.spec, args.seed))
    } else {
        let cfg = TrainConfig {
            epochs: args.train_epochs,
            lr: args.lr,
            batch_size: args.batch,
            batches: data.train.len() / args.batch,
            seed: args.seed,
        };
        let out = local_train(&data.spec, &cfg, &data.train, None, false)?;
        (out.client, out.server)
    };
    let batch = batches(&data.test, args.batch, args.seed, 0)?
        .next()
        .ok_or_else(|| CliError::validation("test split is smaller than one batch"))?;
    let capture = simulate_prior_protocol_leak(&client, &server, &batch.x, &batch.labels)
        .map_err(|e| CliError::validation(e.to_string()))?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::validation(format!("cannot create {}: {e}", args.out.display())))?;
    let truth_csv = export_chunks(&capture.activation, DEFAULT_CHUNK).map_err(|e| CliError::validation(e.to_string()))?;
    write_bytes(&args.out.join("truth_chunks.csv"), truth_csv.as_bytes())?;
    let row_sums: Vec<f64> = (0..args.batch).map(|r| capture.leak.grad_al.row(r).iter().sum()).collect();
    println!("output-gradient row sums: {row_sums:?}");
    // the same capture is impossible under the encrypted protocol
    let he_messages: Vec<_> = [MsgType::Hello, MsgType::Sync, MsgType::CtxPub, MsgType::EncAct, MsgType::GradAl, MsgType::DecW]
        .into_iter()
        .map(|t| (t, contents(t, false)))
        .collect();
    match check_applicable(&LeakageAudit::from_sent(Mode::He, &he_messages)) {
        Ok(()) => println!("encrypted protocol: attack applicable (unexpected)"),
        Err(e) => println!("encrypted protocol: {e}"),
    }
    match run_attack(&capture) {
        Ok(report) => {
            let csv = export_chunks(&report.reconstructed, DEFAULT_CHUNK).map_err(|e| CliError::validation(e.to_string()))?;
            write_bytes(&args.out.join("reconstruction_chunks.csv"), csv.as_bytes())?;
            for (i, s) in report.similarity.iter().enumerate() {
                println!("sample {i}: pearson {:.6}  mse {:.3e}", s.pearson, s.mse);
            }
            let summary = serde_json::json!({
                "condition_number": report.condition_number,
                "similarity": report.similarity,
                "trained_epochs": args.train_epochs,
            });
            write_bytes(&args.out.join("summary.json"), serde_json::to_string_pretty(&summary).unwrap_or_default().as_bytes())?;
            println!("condition number {:.3e}; outputs in {}", report.condition_number, args.out.display());
            Ok(())
        }
        Err(e) => Err(CliError::validation(format!("reconstruction failed: {e}"))),
    }
}

/// Exposed for the self-test.
pub fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Plain => "plain",
        Mode::He => "he",
    }
}
