//! Byte-exact frames pinned on disk. Set `HESPLIT_BLESS=1` to rewrite them
//! after an intentional format change.

mod common;

use common::{enc_act_frame, golden_path, grad_al_frame, sync_frame};
use hesplit_core::ckks::{CkksContext, CkksParams};
use hesplit_core::wire::{
    decode_ct_batch, decode_frame, encode_ct_batch, encode_frame, GradPayload, SyncParams, DEFAULT_MAX_PAYLOAD,
};

fn check(name: &str, fresh: Vec<u8>) {
    let path = golden_path(name);
    if std::env::var_os("HESPLIT_BLESS").is_some() {
        std::fs::write(&path, &fresh).unwrap();
    }
    let pinned = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(fresh, pinned, "{name} no longer matches the pinned bytes");
    let msg = decode_frame(&pinned, DEFAULT_MAX_PAYLOAD).unwrap();
    assert_eq!(encode_frame(&msg, DEFAULT_MAX_PAYLOAD).unwrap(), pinned);
}

#[test]
fn sync_frame_is_pinned() {
    check("sync.frame", sync_frame());
    let msg = decode_frame(&sync_frame(), DEFAULT_MAX_PAYLOAD).unwrap();
    let p = SyncParams::decode(&msg.payload).unwrap();
    assert_eq!((p.features, p.classes, p.batch_size), (448, 5, 4));
}

#[test]
fn enc_act_frame_is_pinned() {
    check("enc_act.frame", enc_act_frame());
    let msg = decode_frame(&enc_act_frame(), DEFAULT_MAX_PAYLOAD).unwrap();
    let ctx = CkksContext::new(CkksParams::tiny()).unwrap();
    let cts = decode_ct_batch(&msg.payload, &ctx).unwrap();
    assert_eq!(encode_ct_batch(&cts), msg.payload);
}

#[test]
fn grad_al_frame_is_pinned() {
    check("grad_al.frame", grad_al_frame());
    let msg = decode_frame(&grad_al_frame(), DEFAULT_MAX_PAYLOAD).unwrap();
    let g = GradPayload::decode(&msg.payload).unwrap();
    assert_eq!(g.grad_al.shape(), &[2, 5]);
    assert!(g.grad_w.is_none());
}

#[test]
fn sync_frame_matches_hand_assembled_bytes() {
    let mut want = b"HSPL".to_vec();
    want.extend([1, 0, 2]); // version 1, SYNC
    want.extend(42u32.to_le_bytes());
    want.extend([1, 1]); // encrypted mode, S1
    want.extend(10u32.to_le_bytes());
    want.extend(0.001f64.to_bits().to_le_bytes());
    for v in [4u32, 3311] {
        want.extend(v.to_le_bytes());
    }
    want.extend(42u64.to_le_bytes());
    for v in [448u32, 5, 1] {
        want.extend(v.to_le_bytes());
    }
    assert_eq!(sync_frame(), want);
}
