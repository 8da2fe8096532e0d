#!/usr/bin/env python3
"""Convert ATOM/HETATM records of a PDB file to the atoms-table CSV.

The B-factor column is written as plddt when --bfactor-as-plddt is given,
which is how predicted-structure files store confidence.
"""
import argparse
import csv
import sys


def records(lines, hetatm: bool):
    kinds = ("ATOM  ", "HETATM") if hetatm else ("ATOM  ",)
    for line in lines:
        if line.startswith("ENDMDL"):
            break  # first model only
        if not line.startswith(kinds):
            continue
        element = line[76:78].strip() or line[12:16].strip().lstrip("0123456789")[:1]
        yield {
            "element": element,
            "x": float(line[30:38]),
            "y": float(line[38:46]),
            "z": float(line[46:54]),
            "residue": int(line[22:26]),
            "resname": line[17:20].strip(),
            "bfactor": float(line[60:66] or 0.0),
        }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("pdb", type=argparse.FileType("r"))
    ap.add_argument("-o", "--out", type=argparse.FileType("w"), default=sys.stdout)
    ap.add_argument("--chain", help="keep only this chain id")
    ap.add_argument("--hetatm", action="store_true", help="also keep HETATM records")
    ap.add_argument("--bfactor-as-plddt", action="store_true")
    args = ap.parse_args()

    lines = [l for l in args.pdb if args.chain is None or l[21:22] == args.chain]
    cols = ["element", "x", "y", "z", "residue", "resname"] + (["plddt"] if args.bfactor_as_plddt else [])
    out = csv.writer(args.out, lineterminator="\n")
    out.writerow(cols)
    n = 0
    for r in records(lines, args.hetatm):
        r["plddt"] = r["bfactor"]
        out.writerow([r[c] for c in cols])
        n += 1
    print(f"{n} atoms", file=sys.stderr)


if __name__ == "__main__":
    main()
