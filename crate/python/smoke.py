"""Smoke test for the matten_py extension.

Build the module and put it next to this file:

    cargo build --release -p matten-py --features extension-module
    cp target/release/libmatten_py.so python/matten_py.so
    python3 python/smoke.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import matten_py as m


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAILED: {what}")
    print(f"ok  {what}")


a_bar, b_bar = m.zoh(1.0, -1.0, 1.0)
check(abs(a_bar - math.exp(-1)) < 1e-12 and abs(b_bar - (1 - math.exp(-1))) < 1e-12, "zoh closed form")

j, din, n = 64, 2, 3
a = ([din, n], [-0.5] * (din * n))
b = ([j, n], [math.sin(i) for i in range(j * n)])
c = ([j, n], [math.cos(i) for i in range(j * n)])
d = ([din], [1.0] * din)
delta = ([j, din], [0.1] * (j * din))
x = ([j, din], [math.sin(0.3 * i) for i in range(j * din)])
ys = m.selective_scan(a, b, c, d, delta, x, "seq")
yp = m.selective_scan(a, b, c, d, delta, x, "par")
check(ys[0] == [j, din], "scan output shape")
check(max(abs(p - q) for p, q in zip(ys[1], yp[1])) < 1e-10, "parallel scan matches sequential")

check(m.crossover_length(16) == 304, "crossover length")
check(m.flops_sa(10, 4) == 800 and m.flops_ffn(10, 4) == 640, "flop formulas")

xl = m.ModelConfig.preset("XL", 3)
g = xl.gflops("16x32x32x4")
check(abs(g / 4008 - 1) < 0.2, f"XL cost {g:.0f} GFLOPs")
check(sum(r["flops"] for r in xl.cost("16x32x32x4")) > 0, "cost rows")

(shape, data), labels = m.sprites(4, 8, 8, 3, seed=1, classes=2)
check(shape == [3, 4, 8, 8, 1] and labels is not None, "sprite data")
check(m.motion((shape, data)) > 0, "sprites move")

cfg = {
    "variant": 3, "layers": 1, "hidden": 8, "d_state": 4, "in_channels": 1, "freq_dim": 8,
    "data": {"frames": 2, "height": 8, "width": 8, "num_videos": 4, "seed": 1},
    "batch_size": 2, "diffusion_steps": 20, "sample_steps": 4, "precision": "f64", "seed": 3,
}
tr = m.Trainer(json.dumps(cfg))
losses = [tr.train_step()["total"] for _ in range(3)]
check(all(math.isfinite(v) for v in losses) and tr.step == 3, "training steps")
with tempfile.TemporaryDirectory() as tmp:
    tr.save(tmp)
    back = m.Trainer.load(tmp)
    check(back.step == 3, "checkpoint reload")
    check(back.sample(2, seed=5) == tr.sample(2, seed=5), "seeded sampling after reload")

try:
    m.ModelConfig(2, 3, 8)
    check(False, "odd layer count rejected")
except ValueError:
    check(True, "odd layer count rejected")

print("all python smoke checks passed")
