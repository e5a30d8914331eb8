import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from sdlss.lib import streams
from sdlss.lib.command import BaseCommand, int_list, m_values
from sdlss.lib.checkpoint import load_planted, save_planted
from sdlss.lib.data import PlantedInstance, make_planted
from sdlss.lib.errors import ConfigError
from sdlss.lib.models import GeneratorModel, build_generator
from sdlss.lib.pml import STEP_SCHEDULES, PmlConfig
from sdlss.lib.reporting import CsvSchema, write_csv
from sdlss.lib.theory import (
    count_regions_exact,
    count_regions_restricted,
    general_position_count,
    is_non_increasing,
    random_arrangement,
    sample_complexity_sweep,
    srec_sweep,
)
from sdlss.reconstruct import open_checkpoint

logger = logging.getLogger(__name__)

VERIFY_KINDS = ("regions", "srec", "sweep")


class VerifyCommand(BaseCommand):
    name = "verify"
    description = "Check region counts, S-REC rates and recovery phase curves at small scale."

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("kind", nargs="?", choices=VERIFY_KINDS)
        parser.add_argument("--k", type=int)
        parser.add_argument("--h", type=int, default=4, help="hyperplanes (regions)")
        parser.add_argument("--s", type=int, help="subspace dimension or latent sparsity")
        parser.add_argument("--arrangements", type=int, default=1)

        parser.add_argument("--checkpoint", help="use a trained generator (srec)")
        parser.add_argument("--n", type=int)
        parser.add_argument("--hidden", default="32")
        parser.add_argument("--alpha", type=float, default=0.5)
        parser.add_argument("--trials", type=int, default=10000)
        parser.add_argument("--m", type=int)
        parser.add_argument("--m-list")
        parser.add_argument("--m-sweep", metavar="A:B")

        parser.add_argument("--instances", type=int, default=50)
        parser.add_argument("--planted", help="planted instances written by an earlier sweep")
        parser.add_argument("--eval-steps", type=int, default=1000)
        parser.add_argument("--beta", type=float, default=0.01)
        parser.add_argument("--restarts", type=int, default=3)
        parser.add_argument("--step-schedule", choices=STEP_SCHEDULES, default="adaptive")

    def execute(self) -> None:
        kind = self.args.kind
        if kind is None:
            raise ConfigError(f"choose what to verify: {', '.join(VERIFY_KINDS)}")
        getattr(self, f"verify_{kind}")()

    def verify_regions(self) -> None:
        args = self.args
        k = args.k or 2
        rows = []
        passed = True
        for i in range(args.arrangements):
            seed = args.seed + i
            spec = random_arrangement(k, args.h, seed, args.s)
            if args.s is None:
                count = count_regions_exact(spec)
                expected = general_position_count(args.h, k)
            else:
                count = count_regions_restricted(spec)
                expected = math.comb(k, args.s) * general_position_count(args.h, args.s)
            status = "PASS" if count == expected else "FAIL"
            passed &= count == expected
            rows.append(
                {"k": k, "h": args.h, "s": args.s, "seed": seed, "count": count,
                 "expected": expected, "status": status}
            )
            print(f"{count} regions (expected {expected}) {status}")
        write_csv(self.artifact("regions.csv"), CsvSchema.Regions, rows)
        print("PASS" if passed else "FAIL")

    def generator(self, k: int, n: int) -> GeneratorModel:
        if self.args.checkpoint:
            return open_checkpoint(self.args.checkpoint).generator
        return build_generator(
            [k, *int_list(self.args.hidden), n], streams.stream_seed(self.args.seed, "model")
        )

    def verify_srec(self) -> None:
        args = self.args
        G = self.generator(args.k or 16, args.n or 64)
        s = args.s or 4
        reports = srec_sweep(
            G,
            s,
            m_values(args.m_sweep, args.m_list, args.m),
            args.alpha,
            args.trials,
            streams.stream_seed(args.seed, "verify"),
            threads=args.threads,
        )
        write_csv(
            self.artifact("srec.csv"),
            CsvSchema.Srec,
            [
                {
                    "m": r.m,
                    "alpha": r.alpha,
                    "trials": r.trials,
                    "violations": r.violations,
                    "rate": r.empirical_rate,
                    "stderr": r.stderr,
                    "bound_note": r.bound_note,
                }
                for r in reports
            ],
        )
        for r in reports:
            print(f"m={r.m:<5} rate={r.empirical_rate:.4f} ± {r.stderr:.4f}  {r.bound_note}")
        monotone = is_non_increasing(
            [r.empirical_rate for r in reports], [r.stderr for r in reports]
        )
        print(f"Rate non-increasing in m within 2 standard errors: {'PASS' if monotone else 'FAIL'}")

    def planted(self) -> PlantedInstance:
        args = self.args
        if args.planted:
            path = Path(args.planted)
            if not path.is_file():
                raise ConfigError(f"planted instances {path} do not exist")
            planted = load_planted(path)
            logger.info(
                f"Loaded {len(planted)} planted instances from {path}: "
                f"k={planted.k}, n={planted.n}, s={planted.s_true}"
            )
            return planted
        return make_planted(
            args.k or 20,
            args.s or 3,
            args.n or 100,
            args.instances,
            streams.stream_seed(args.seed, "data"),
            hidden=tuple(int_list(args.hidden)),
        )

    def verify_sweep(self) -> None:
        args = self.args
        planted = self.planted()
        save_planted(self.artifact("planted.sdls"), planted)
        s_true = planted.s_true
        cfg = PmlConfig(
            s=s_true,
            beta=args.beta,
            eval_steps=args.eval_steps,
            restarts=args.restarts,
            schedule=args.step_schedule,
        )
        rows = sample_complexity_sweep(
            planted,
            m_values(args.m_sweep, args.m_list or "1,2,5,10,20,40,100", args.m),
            cfg,
            streams.stream_seed(args.seed, "verify"),
        )
        write_csv(
            self.artifact("sweep.csv"),
            CsvSchema.Sweep,
            [vars(row) for row in rows],
        )
        for row in rows:
            print(
                f"m={row.m:<5} median relative error {row.median_rel_err:.4f} "
                f"[{row.q25:.4f}, {row.q75:.4f}]"
            )
        # standard error of a median from the interquartile range
        errors = [
            1.2533 * (row.q75 - row.q25) / 1.349 / np.sqrt(row.instances) for row in rows
        ]
        monotone = is_non_increasing([row.median_rel_err for row in rows], errors)
        print(f"Error non-increasing in m within 2 standard errors: {'PASS' if monotone else 'FAIL'}")


def main() -> None:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s"
    )
    sys.exit(VerifyCommand().run())


if __name__ == "__main__":
    main()
