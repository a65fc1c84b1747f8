//! Print the fitted calibrator stored in a checkpoint. Debug aid.

use catuda::checkpoint::load_checkpoint;

fn main() {
    let path = std::env::args().nth(1).expect("usage: dump_ckpt FILE");
    let ckpt = load_checkpoint(path.as_ref()).expect("load checkpoint");
    println!(
        "epoch {} kind {:?} t {} fallback {}",
        ckpt.epoch, ckpt.calibrator.kind, ckpt.calibrator.t, ckpt.calibrator.fallback
    );
}
