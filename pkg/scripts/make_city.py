#!/usr/bin/env python3
"""Generate a synthetic check-in city (checkins.csv + friends.csv).

Each region is a ring of POIs that regular users walk with occasional
derailments; optional noise users walk uniformly at random. The output is
directly consumable by `mac-sim ingest` and `mac-sim run`.
"""

import argparse

from macsim.synth import CityConfig, write_city


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--users", type=int, default=100)
    parser.add_argument("--regions", type=int, default=2)
    parser.add_argument("--pois-per-region", type=int, default=40)
    parser.add_argument("--categories", type=int, default=8)
    parser.add_argument("--seq-len", type=int, default=16)
    parser.add_argument("--derail-prob", type=float, default=0.02)
    parser.add_argument("--noise-frac", type=float, default=0.0)
    parser.add_argument("--friends-per-user", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True)
    args = parser.parse_args()

    cfg = CityConfig(
        n_users=args.users,
        n_regions=args.regions,
        pois_per_region=args.pois_per_region,
        n_categories=args.categories,
        seq_len=args.seq_len,
        derail_prob=args.derail_prob,
        noise_frac=args.noise_frac,
        friends_per_user=args.friends_per_user,
        seed=args.seed,
    )
    checkins, friends = write_city(args.out, cfg)
    print(f"wrote {checkins} and {friends}")


if __name__ == "__main__":
    main()
