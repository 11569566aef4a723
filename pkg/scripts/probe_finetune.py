"""Probe: how do main and finetune-all adaptation arms move with step count."""

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
    bench = ex.Workbench(desk_config(), 0)
    t0 = time.time()
    aligned = bench.aligned()
    print(f"source+align ready ({time.time() - t0:.0f}s)", flush=True)

    speakers = list(bench.cfg.adapt_speaker_ids())
    unadapted = bench.evaluate_arm({s: aligned for s in speakers})
    print(f"unadapted mel {mean(unadapted['mel_mae']):.4f} "
          f"prox {mean(unadapted['proximity']):.4f}", flush=True)

    for steps in (200, 500, 1000, 2000):
        row = {}
        for variant, tag in (("main", "main"),
                             ("finetune_mel_encoder_and_decoder", "ft")):
            ckpts, tails = {}, []
            for spk in speakers:
                plan = bench.cfg.adapt_plan(
                    variant, steps=steps,
                    seed=bench.cfg.adapt.seed + 31 * spk + 50)
                records = bench.adapt_records(spk, 50)
                t1 = time.time()
                ckpt, metrics = pl.adapt_untranscribed(aligned, records, plan)
                ckpts[spk] = ckpt
                tail = [v for _, _, n, v in metrics if n == "reconstruction"][-20:]
                tails.append(sum(tail) / len(tail))
                print(f"  steps={steps} {tag} s{spk} train_recon "
                      f"{tails[-1]:.4f} ({time.time() - t1:.0f}s)", flush=True)
            vals = bench.evaluate_arm(ckpts)
            row[tag] = vals
        a = row["main"]["mel_mae"]; b = row["ft"]["mel_mae"]
        wins = sum(1 for k in a if a[k] < b[k]) / len(a)
        print(f"steps={steps}: main mel {mean(a):.4f} prox "
              f"{mean(row['main']['proximity']):.4f} | ft mel {mean(b):.4f} "
              f"prox {mean(row['ft']['proximity']):.4f} | "
              f"main-wins {wins:.3f}", flush=True)


if __name__ == "__main__":
    main()
