"""Probe: main vs finetune-all across adaptation-data sizes at fixed steps."""

import sys
import time
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from meladapt import experiments as ex
from meladapt import pipeline as pl
from meladapt.config import desk_config


def mean(d):
    return sum(d[k] for k in sorted(d)) / len(d)


def main():
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
    bench = ex.Workbench(desk_config(), 0)
    t0 = time.time()
    aligned = bench.aligned()
    print(f"source+align ready ({time.time() - t0:.0f}s), steps={steps}",
          flush=True)
    speakers = list(bench.cfg.adapt_speaker_ids())

    for n in (2, 5, 10, 20, 50):
        row = {}
        for variant, tag in (("main", "main"),
                             ("finetune_mel_encoder_and_decoder", "ft")):
            ckpts = {}
            for spk in speakers:
                plan = bench.cfg.adapt_plan(
                    variant, steps=steps,
                    seed=bench.cfg.adapt.seed + 31 * spk + n)
                ckpt, _ = pl.adapt_untranscribed(
                    aligned, bench.adapt_records(spk, n), plan)
                ckpts[spk] = ckpt
            row[tag] = bench.evaluate_arm(ckpts)
        a = row["main"]["mel_mae"]; b = row["ft"]["mel_mae"]
        wins = sum(1 for k in a if a[k] < b[k]) / len(a)
        pa = row["main"]["proximity"]; pb = row["ft"]["proximity"]
        pwins = sum(1 for k in pa if pa[k] < pb[k]) / len(pa)
        print(f"n={n}: main mel {mean(a):.4f} prox {mean(pa):.4f} | "
              f"ft mel {mean(b):.4f} prox {mean(pb):.4f} | "
              f"main-wins mel {wins:.3f} prox {pwins:.3f}", flush=True)


if __name__ == "__main__":
    main()
