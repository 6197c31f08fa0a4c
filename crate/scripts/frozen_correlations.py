"""Independent Spearman correlations of QF against architecture features.

Usage: frozen_correlations.py RECORDS_FP RECORDS_K CENTER TOLERANCE
Prints JSON with the correlations over all joined records and over the
fixed-FLOPs slice |flops - CENTER| <= TOLERANCE * CENTER.
"""
import csv
import json
import sys

from scipy.stats import spearmanr


def parse_arch(s):
    parts = dict((p[0], p[1:]) for p in s.split("-"))
    depths = [int(x) for x in parts["d"].split(",")]
    widths = [int(x) for x in parts["w"].split(",")]
    kernels = [int(x) for x in parts["k"].split(",")]
    return int(parts["r"]), depths, widths, kernels


def features(arch, flops):
    res, depths, widths, kernels = parse_arch(arch)
    depth = sum(depths)
    return {
        "flops": float(flops),
        "resolution": float(res),
        "total_depth": float(depth),
        "avg_width": sum(widths) / depth,
        "avg_kernel": sum(kernels) / depth,
    }


def rows(path):
    return list(csv.DictReader(open(path)))


def correlations(records):
    out = {}
    qf = [r["qf"] for r in records]
    for name in ["avg_kernel", "avg_width", "flops", "resolution", "total_depth"]:
        x = [r["features"][name] for r in records]
        if len(records) < 2 or len(set(x)) < 2 or len(set(qf)) < 2:
            out[name] = None
        else:
            out[name] = float(spearmanr(qf, x).correlation)
    return out


def main():
    fp_path, k_path, center, tol = sys.argv[1], sys.argv[2], float(sys.argv[3]), float(sys.argv[4])
    fp = {}
    for r in rows(fp_path):
        fp[r["arch"]] = (float(r["acc"]), int(r["flops_fp"]))
    joined = {}
    for r in rows(k_path):
        if r["arch"] in fp and fp[r["arch"]][0] > 0:
            acc_fp, flops = fp[r["arch"]]
            joined[r["arch"]] = {"qf": float(r["acc"]) / acc_fp, "flops": flops, "features": features(r["arch"], flops)}
    records = list(joined.values())
    sliced = [r for r in records if abs(r["flops"] - center) <= tol * center]
    print(json.dumps({
        "n": len(records),
        "spearman": correlations(records),
        "slice_n": len(sliced),
        "slice_spearman": correlations(sliced),
    }, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
