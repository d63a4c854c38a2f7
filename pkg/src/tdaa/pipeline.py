"""Run every stage of the default experiment in order.

    python -m tdaa.pipeline --config cfg.json --out out/

Stages already completed are reused, so an interrupted run can be resumed
with the same command. Exits with the first failing stage's code.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time

from .cli import run
from .config import load_config

log = logging.getLogger("tdaa.pipeline")


def stages(cfg: dict) -> list[list[str]]:
    ds = cfg["downstream"]["dataset"]
    out = [["gen-data"]]
    methods = list(dict.fromkeys(cfg["pretrain"]["methods"] + cfg["eval"]["transfer_methods"]))
    out += [["pretrain", "--method", m] for m in methods]
    out += [["probe", "--victim", m, "--dataset", ds] for m in methods]
    out += [["probe", "--dataset", "shapes10b"], ["probe", "--dataset", ds, "--finetune"]]
    out += [["attack"], ["attack-fixed"], ["eval"], ["eval", "--fixed"], ["eval", "--finetune"],
            ["eval", "--dataset", "shapes10b"], ["transfer"], ["retrieval"], ["ablate-alpha"],
            ["ablate-criterion"], ["project"], ["report"]]
    return out


def run_pipeline(config: str | None, out: str, verbose: bool = False) -> int:
    cfg = load_config(config)
    common = ["--out", out, "--reuse"] + (["--config", config] if config else []) + (["-v"] if verbose else [])
    for stage in stages(cfg):
        t0 = time.time()
        code = run([stage[0], *common, *stage[1:]])
        log.info("%s finished in %.1fs (exit %d)", " ".join(stage), time.time() - t0, code)
        if code != 0:
            return code
    return 0


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(prog="python -m tdaa.pipeline")
    parser.add_argument("--config")
    parser.add_argument("--out", default="out")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    sys.exit(run_pipeline(args.config, args.out, args.verbose))


if __name__ == "__main__":
    main()
