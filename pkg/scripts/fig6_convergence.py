#!/usr/bin/env python3
"""Per-user learning on the fig6 config: potential trace, stability period and matched-power delay."""
import argparse
import warnings
from importlib import resources
from pathlib import Path

import numpy as np

from ofdma_delay.calibrate import calibrate_policy
from ofdma_delay.config import load_config
from ofdma_delay.online import run_algorithm2
from ofdma_delay.sim import PolicySpec, Simulator


def delay(cfg, policy, seeds, slots):
    out = []
    for s in seeds:
        sim = Simulator(cfg, policy, seed=s)
        sim.run(slots // 10)
        sim.reset_metrics()
        sim.run(slots)
        out.append(sim.metrics().weighted_delay)
    return float(np.mean(out))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="1,2,3", help="learning seeds")
    ap.add_argument("--slots", type=int, default=1_000_000, help="measured slots per evaluation run")
    ap.add_argument("--out", type=Path, default=Path("runs/fig6"), help="output directory")
    args = ap.parse_args()

    cfg = load_config(resources.files("ofdma_delay") / "configs" / "fig6.cfg")
    args.out.mkdir(parents=True, exist_ok=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        base = {k: delay(cfg, calibrate_policy(PolicySpec(k), cfg), range(3), args.slots)
                for k in ("mlwdf", "round_robin")}
        print(f"baselines at P_0={cfg.P_0:g}: " + ", ".join(f"{k} {v:.3f} s" for k, v in base.items()))
        for seed in (int(s) for s in args.seeds.split(",")):
            res = run_algorithm2(cfg, seed=seed, initial="ramp", raise_on_cap=False, max_slots=30_000_000)
            (args.out / f"trace_seed{seed}.tsv").write_text(res.export_trace())
            stable = [res.stable_period(cfg.solver.delta_v, k) for k in range(cfg.K)]
            learned = calibrate_policy(PolicySpec("decomposed", table=res.table, gamma=cfg.gamma), cfg)
            d = delay(cfg, learned, range(3), args.slots)
            print(f"seed {seed}: {res.status}, stable by period {max(p if p is not None else -1 for p in stable)}, "
                  f"matched-power delay {d:.3f} s (gamma {learned.gamma:.3g})")


if __name__ == "__main__":
    main()
