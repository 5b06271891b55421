use std::time::{Duration, Instant};

use hesplit_core::ckks::{keygen, serialize_ct, CkksContext};
use hesplit_core::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::{BenchArgs, CliError};

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

fn time<T>(reps: usize, mut f: impl FnMut() -> T) -> Duration {
    median(
        (0..reps)
            .map(|_| {
                let t = Instant::now();
                std::hint::black_box(f());
                t.elapsed()
            })
            .collect(),
    )
}

pub fn bench_he(args: BenchArgs) -> Result<(), CliError> {
    if args.reps == 0 {
        return Err(CliError::validation("reps must be positive"));
    }
    par::set_enabled(!args.sequential);
    let mut json = serde_json::Map::new();
    for set in &args.he_set {
        let ctx = CkksContext::new(set.params())?;
        let t = Instant::now();
        let keys = keygen(&ctx, 1);
        let keygen_time = t.elapsed();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let values: Vec<f64> = (0..ctx.slots()).map(|_| rng.random_range(-10.0..10.0)).collect();
        let delta = ctx.scale();
        let pt = ctx.encode(&values, 0, delta)?;
        let ct = ctx.encrypt_symmetric(&keys.secret, &pt, &mut rng)?;
        let ct2 = ctx.encrypt(&keys.public, &pt, &mut rng)?;
        let prod = ctx.mul_plain(&ct, &pt)?;
        let level1 = ctx.rescale(&prod)?;
        let reps = args.reps;

        let mut rows: Vec<(&str, Duration)> = vec![("keygen", keygen_time)];
        rows.push(("encode", time(reps, || ctx.encode(&values, 0, delta))));
        rows.push(("encrypt (public key)", time(reps, || ctx.encrypt(&keys.public, &pt, &mut rng))));
        let mut rng2 = ChaCha20Rng::seed_from_u64(3);
        rows.push(("encrypt (secret key)", time(reps, || ctx.encrypt_symmetric(&keys.secret, &pt, &mut rng2))));
        rows.push(("decrypt + decode", time(reps, || ctx.decrypt(&keys.secret, &ct))));
        rows.push(("add", time(reps, || ctx.add(&ct, &ct2))));
        rows.push(("mul_plain", time(reps, || ctx.mul_plain(&ct, &pt))));
        rows.push(("rescale", time(reps, || ctx.rescale(&prod))));
        rows.push(("rotate 1", time(reps, || ctx.rotate(&level1, 1, &keys.rotation))));
        rows.push(("slot_sum 16", time(reps, || ctx.slot_sum(&level1, 16, &keys.rotation))));

        let fresh = serialize_ct(&ct).len();
        let one = serialize_ct(&level1).len();
        println!(
            "{} (N={}, {} primes, {} slots, {})",
            set.name(),
            ctx.n(),
            ctx.chain_len(),
            ctx.slots(),
            if par::is_parallel() { "parallel" } else { "sequential" }
        );
        for (name, d) in &rows {
            println!("  {name:<22} {:>10.3} ms", d.as_secs_f64() * 1e3);
        }
        println!("  fresh ciphertext       {fresh:>10} bytes");
        println!("  level-1 ciphertext     {one:>10} bytes");
        let mut entry = serde_json::Map::new();
        for (name, d) in &rows {
            entry.insert(format!("{name}_ms"), serde_json::json!(d.as_secs_f64() * 1e3));
        }
        entry.insert("fresh_ciphertext_bytes".into(), serde_json::json!(fresh));
        entry.insert("level1_ciphertext_bytes".into(), serde_json::json!(one));
        json.insert(set.name().into(), serde_json::Value::Object(entry));
    }
    if let Some(path) = &args.report {
        let text = serde_json::to_string_pretty(&serde_json::Value::Object(json)).unwrap_or_default();
        std::fs::write(path, text).map_err(|e| CliError::validation(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}
