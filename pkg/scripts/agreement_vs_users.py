#!/usr/bin/env python3
"""How often the queue-aware and best-channel subband rules agree, as the user count grows (fig5 config)."""
import argparse
from dataclasses import replace
from importlib import resources

import numpy as np

from ofdma_delay.config import load_config
from ofdma_delay.oracle import birth_death_stationary, build_csi_alphabet, per_user_poisson_solve
from ofdma_delay.policy import assignment_agreement


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--users", default="2,4,8,16", help="comma-separated user counts")
    ap.add_argument("--draws", type=int, default=10_000, help="CSI/QSI draws per point")
    ap.add_argument("--total-rate", type=float, default=None,
                    help="split this aggregate arrival rate evenly instead of keeping the per-user rate")
    args = ap.parse_args()

    base = load_config(resources.files("ofdma_delay") / "configs" / "fig5.cfg")
    alpha = build_csi_alphabet(base.csi_levels)
    for K in (int(k) for k in args.users.split(",")):
        lam = base.lam[0] if args.total_rate is None else args.total_rate / K
        cfg = replace(base, K=K, lam=lam, mean_packet_bits=base.mean_packet_bits[0], beta=1.0)
        sols = [per_user_poisson_solve(k, alpha, cfg, ties="split") for k in range(K)]
        rng = np.random.default_rng(K)
        pi = birth_death_stationary(lam * cfg.tau, sols[0].mu_tau)
        queues = rng.choice(cfg.N_Q + 1, size=(args.draws, K), p=pi)
        gains = rng.exponential(size=(args.draws, K, cfg.N_F))
        rate, se, n = assignment_agreement(np.array([s.v for s in sols]), queues, gains, cfg)
        print(f"K={K:>3}  agreement {rate:.3f} +/- {se:.3f}  ({n} live subbands)")


if __name__ == "__main__":
    main()
