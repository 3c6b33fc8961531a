"""Compare additive and quadratic attention: FLOP exponents and wall time."""
import argparse
import sys

from stereopose.cli import bench_attention, fit_exponent


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", default="256,512,1024,2048,4096")
    ap.add_argument("--d", type=int, nargs="+", default=[8, 16, 64])
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args(argv)
    ns = [int(v) for v in args.n.split(",")]
    print(f"{'d':>4} {'k_vanilla':>10} {'k_ecaa':>8} {'flop ratio':>11} {'time ratio':>11}")
    for d in args.d:
        rows = bench_attention(ns, d, args.repeats, seed=0)
        kv = fit_exponent(ns, [r["vanilla_flops"] for r in rows])
        ke = fit_exponent(ns, [r["ecaa_flops"] for r in rows])
        last = rows[-1]
        print(f"{d:>4} {kv:>10.3f} {ke:>8.3f} {last['vanilla_flops'] / last['ecaa_flops']:>11.1f} "
              f"{last['vanilla_seconds'] / last['ecaa_seconds']:>11.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
