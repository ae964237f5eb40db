"""Counted-FLOP and wall-clock scaling of local vs global spiking self-attention."""

import argparse

from lsformer.bench import TOKEN_GRID, run_bench


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tokens", default=",".join(map(str, TOKEN_GRID)))
    ap.add_argument("--dims", default="64,128", help="embedding widths to sweep")
    ap.add_argument("--out-prefix", default="bench")
    args = ap.parse_args()
    tokens = tuple(int(t) for t in args.tokens.split(","))
    for dim in (int(d) for d in args.dims.split(",")):
        res = run_bench(tokens, dim=dim)
        path = f"{args.out_prefix}_d{dim}.csv"
        with open(path, "w") as fh:
            fh.write(res.to_csv())
        slopes = ", ".join(f"{c} {res.slope(c):.3f}" for c in ("lsssa_core_flops", "lsssa_block_flops", "global_flops"))
        print(f"D={dim}: {slopes} -> {path}")


if __name__ == "__main__":
    main()
