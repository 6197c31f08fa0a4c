"""Lower median of the flops_fp column of a record CSV."""
import csv
import sys

flops = sorted(int(r["flops_fp"]) for r in csv.DictReader(open(sys.argv[1])))
print(flops[(len(flops) - 1) // 2])
