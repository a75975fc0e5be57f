# Calibration probe for the acceptance experiment profile (not shipped).
import dataclasses
import os
import sys
import tempfile
import time

from cs2u.data import SynthTaskSpec, generate_dataset, load_split
from cs2u.evaluate import decode_corpus, evaluate_model, unit_bleu
from cs2u.model import ModelConfig, build_model, load_checkpoint, transfer_encoder
from cs2u.training import TrainConfig, distill, train

SEED = int(sys.argv[1]) if len(sys.argv) > 1 else 0
AR_STEPS = int(sys.argv[2]) if len(sys.argv) > 2 else 700
NAR_STEPS = int(sys.argv[3]) if len(sys.argv) > 3 else 500
S2_STEPS = int(sys.argv[4]) if len(sys.argv) > 4 else 120

spec = SynthTaskSpec(
    n_phones=8, n_units=10, min_phones=2, max_phones=5,
    min_duration=8, max_duration=14,
    min_units_per_phone=1, max_units_per_phone=2,
    noise_sigma=0.05, swap_prob=0.1,
    upsample_factor=2, train_count=320, valid_count=32, test_count=96,
    seed=100 + SEED,
)
mcfg = ModelConfig(d_model=32, n_heads=4, feature_dim=8, n_units=10,
                   upsample_factor=2, dropout=0.05, max_positions=256)
tcfg = TrainConfig(
    stage1_steps=NAR_STEPS, stage1_warmup=max(10, NAR_STEPS // 8),
    stage2_steps=S2_STEPS, stage2_warmup=max(5, S2_STEPS // 8),
    batch_frames=800, glance_decay_steps=NAR_STEPS // 2, seed=SEED,
)

root = tempfile.mkdtemp(prefix=f"calib{SEED}_")
print("workdir", root, flush=True)
data = os.path.join(root, "data")
rep = generate_dataset(spec, data)
print(f"infeasible {rep.infeasible_fraction:.3f}", flush=True)
train_feats, train_units = load_split(data, "train")
test_feats, test_units = load_split(data, "test")

t0 = time.time()
ar = build_model(dataclasses.replace(mcfg, variant="ar"), seed=SEED)
train(ar, data, tcfg, "ar", os.path.join(root, "ar"), steps=AR_STEPS)
ar_bleu = evaluate_model(ar, test_feats, test_units)
print(f"AR train-bleu {evaluate_model(ar, train_feats[:64], train_units[:64]):.4f} "
      f"test-bleu {ar_bleu:.4f} ({time.time()-t0:.0f}s)", flush=True)

kd = os.path.join(root, "kd")
distill(ar, data, kd)
kd_units = load_split(kd, "train")[1]
print(f"kd fidelity {unit_bleu(kd_units, train_units):.4f}", flush=True)

results = {}

def nar_run(name, pretrain, glat, use_kd, position_mode="all"):
    t0 = time.time()
    m = build_model(mcfg, seed=SEED)
    if pretrain:
        transfer_encoder(ar, m)
    cfg = dataclasses.replace(tcfg, glance_position_mode=position_mode)
    r = train(m, kd if use_kd else data, cfg, "nar-stage1",
              os.path.join(root, name), use_glancing=glat)
    b = evaluate_model(m, test_feats, test_units)
    results[name] = (b, r.checkpoint_path)
    print(f"{name:18s} bleu {b:.4f} ({time.time()-t0:.0f}s)", flush=True)
    return b

full = nar_run("full", True, True, True)
m5 = load_checkpoint(results["full"][1])
t5 = time.time()
train(m5, kd, tcfg, "nar-stage2", os.path.join(root, "nmla"))
nm = evaluate_model(m5, test_feats, test_units)
print(f"{'full+nmla':18s} bleu {nm:.4f} ({time.time()-t5:.0f}s)", flush=True)
nop = nar_run("no-pretrain", False, True, True)
nog = nar_run("no-glat", True, False, True)
nok = nar_run("no-kd", True, True, False)
print(f"SEED {SEED}: AR {ar_bleu:.3f} | full {full:.3f} nmla {nm:.3f} | "
      f"nopre {full-nop:+.3f} noglat {full-nog:+.3f} nmla-delta {nm-full:+.3f} "
      f"parity {(nm/ar_bleu if ar_bleu else 0):.3f}", flush=True)
