"""Print core-filtered statistics and group-size tables for a raw dataset file.

    python scripts/dataset_stats.py ml1m /path/to/ratings.dat
    python scripts/dataset_stats.py retailrocket /path/to/events.csv [--dedup]
"""
import argparse
import json
import time

from seqrec_dro.data import build_sequences, prepare
from seqrec_dro.groups import annotate

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("dataset", choices=["ml1m", "retailrocket"])
    ap.add_argument("input")
    ap.add_argument("--core", type=int, default=5)
    ap.add_argument("--dedup", action="store_true")
    args = ap.parse_args()
    t0 = time.time()
    ds = prepare(args.dataset, args.input, args.core, args.dedup)
    print(json.dumps({**ds.stats(), "seconds": round(time.time() - t0, 1)}))
    seqs = build_sequences(ds)
    for scheme, axis in (("pop", "pop"), ("seq", "seq")):
        for split in ("33", "2060", "1080"):
            a = annotate(seqs, scheme, split_pop=split, split_seq=split)
            usplit = ", ".join(f"{v:.2f}" for v in a.usplit(axis).values())
            dsplit = ", ".join(f"{v:.1f}" for v in a.dsplit(axis, seqs).values())
            print(f"{axis}{split}: usplit ({usplit})  dsplit ({dsplit})")
