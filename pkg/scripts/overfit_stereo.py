"""Overfit the stereo network on textured fronto-parallel planes and log EPE."""
import argparse
import csv
import sys

from stereopose import stereo_network as SN


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--pairs", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr-low", type=float, default=1e-4)
    ap.add_argument("--lr-high", type=float, default=3e-3)
    ap.add_argument("--no-ta", action="store_true")
    ap.add_argument("--no-seca", action="store_true")
    ap.add_argument("--log", default=None, help="optional CSV of per-step loss and EPE")
    args = ap.parse_args(argv)

    cfg = SN.TSCAConfig(use_ta=not args.no_ta, use_seca=not args.no_seca)
    pairs = SN.textured_plane_pairs(n=args.pairs, size=args.size, seed=args.seed)
    initial = SN.evaluate_epe(SN.init_tsca(cfg, args.seed), cfg, pairs)
    print(f"initial EPE {initial:.4f} px", flush=True)

    def log(step, loss, e):
        if step % 25 == 0:
            print(f"step {step:4d}  loss {loss:.4f}  epe {e:.4f}", flush=True)

    res = SN.train_toy(pairs, cfg, args.steps, seed=args.seed, schedule="cyclic",
                       lr_low=args.lr_low, lr_high=args.lr_high, log=log)
    final = SN.evaluate_epe(res.params, cfg, pairs)
    print(f"final EPE {final:.4f} px ({final / initial:.1%} of initial) in {res.seconds:.0f} s")
    if args.log:
        with open(args.log, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "epe"])
            w.writerows(zip(range(len(res.losses)), res.losses, res.epes))
    return 0


if __name__ == "__main__":
    sys.exit(main())
