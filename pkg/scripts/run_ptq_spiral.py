"""Post-training quantization ladder on the two-spiral classifier.

Trains a small float MLP, then quantizes it at W4/A8 with progressively
better recipes and prints the accuracy of each step:

    float -> min-max -> sqnr -> sqnr + CLE + adaround

Run from the repo root:  python3 scripts/run_ptq_spiral.py
"""

from __future__ import annotations

import argparse

import numpy as np

from fixquant import toys
from fixquant.datasets import evaluate
from fixquant.ptq import AdaRoundParams, PtqOptions, run_ptq_pipeline
from fixquant.qat import QatOptions, qat_train
from fixquant.quantsim import compute_encodings, create_quantsim
from fixquant.range_setting import RangeScheme


def train_float(ds, seed: int):
    # the QAT trainer doubles as a float trainer once every quantizer is off
    sim = create_quantsim(toys.mlp([2, 24, 24, 2], seed=3))
    for spec in sim.param_quantizers.values():
        spec.enabled = False
    for spec in sim.activation_quantizers.values():
        spec.enabled = False
    opts = QatOptions(epochs=80, learning_rate=0.1, lr_decay_every=40)
    qat_train(sim, ds.x, ds.y, options=opts, seed=seed)
    return sim.graph


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--param-bw", type=int, default=4)
    ap.add_argument("--output-bw", type=int, default=8)
    ap.add_argument("--adaround-iterations", type=int, default=2000)
    args = ap.parse_args(argv)

    ds = toys.spiral_dataset(n_per_class=120, n_classes=2, seed=0)
    model = train_float(ds, args.seed)
    feed = [ds.x[i : i + 64] for i in range(0, len(ds), 64)]

    rows = [("float", evaluate(model, ds))]

    for kind in ("min_max", "sqnr"):
        sim = create_quantsim(
            model,
            default_param_bw=args.param_bw,
            default_output_bw=args.output_bw,
            scheme=RangeScheme(kind=kind),
        )
        compute_encodings(sim, feed)
        rows.append((kind, evaluate(sim, ds)))

    options = PtqOptions(
        param_bw=args.param_bw,
        output_bw=args.output_bw,
        scheme=RangeScheme(kind="sqnr"),
        use_bias_correction=False,
        adaround_params=AdaRoundParams(num_iterations=args.adaround_iterations),
        seed=args.seed,
    )
    sim = run_ptq_pipeline(model, feed, options)
    rows.append(("sqnr + cle + adaround", evaluate(sim, ds)))

    print(f"two-spiral MLP, W{args.param_bw}/A{args.output_bw}, {len(ds)} points")
    for name, acc in rows:
        print(f"  {name:<24s} accuracy {acc:.3f}")
    best = max(rows[1:], key=lambda r: r[1])
    drop = rows[0][1] - best[1]
    print(f"best quantized recipe: {best[0]} ({drop:+.3f} vs float)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
