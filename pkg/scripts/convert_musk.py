"""Convert a UCI Musk ``clean1.data`` / ``clean2.data`` file to the bag CSV.

Source rows are ``molecule,conformation,f1,...,f166,class.``; each molecule
is a bag and each conformation an instance. The documented sizes are
92 bags / 476 instances (Musk1, 47 positive) and 102 bags / 6598 instances
(Musk2, 39 positive); pass ``--expect BAGS,INSTANCES`` to have them checked.

    python scripts/convert_musk.py clean1.data musk1.csv --expect 92,476
"""

import argparse
import csv
import sys

N_FEATURES = 166


def read_musk(path):
    bags: dict[str, list] = {}
    labels: dict[str, int] = {}
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            fields = line.rstrip(".").split(",")
            if len(fields) != N_FEATURES + 3:
                raise ValueError(f"{path}:{lineno}: expected {N_FEATURES + 3} fields, got {len(fields)}")
            name = fields[0]
            label = int(float(fields[-1]))
            if labels.setdefault(name, label) != label:
                raise ValueError(f"{path}:{lineno}: molecule {name} has mixed labels")
            bags.setdefault(name, []).append([float(v) for v in fields[2:-1]])
    return bags, labels


def write_csv(bags, labels, out):
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bag_id", "label"] + [f"f{j}" for j in range(N_FEATURES)])
        for name, rows in bags.items():
            for row in rows:
                w.writerow([name, labels[name]] + [repr(v) for v in row])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source")
    ap.add_argument("out")
    ap.add_argument("--expect", help="BAGS,INSTANCES to verify")
    args = ap.parse_args(argv)
    bags, labels = read_musk(args.source)
    n_inst = sum(len(r) for r in bags.values())
    print(f"{len(bags)} bags ({sum(labels.values())} positive), {n_inst} instances")
    if args.expect:
        want = tuple(int(t) for t in args.expect.split(","))
        if want != (len(bags), n_inst):
            print(f"count mismatch: expected {want}, got {(len(bags), n_inst)}", file=sys.stderr)
            return 1
    write_csv(bags, labels, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
