"""A miniature few-shot cross-dataset transfer run.

Pretrains on the synthetic source city, then evaluates zero-shot on a
shifted target and fine-tunes on 1%/5% of the target's training images
with either the pretrained or a random init. Every cell is seeded, so the
whole run replays bit-identically. This is a shrunken version of the
default benchmark plan (one seed, small datasets) so it finishes in under
a minute; `mhe bench` runs the full, multi-seed version.
"""

from mhe import ExperimentPlan, run_plan

plan = ExperimentPlan(
    out_dir="/tmp/mhe_demo_results",
    data_dir="/tmp/mhe_demo_benchdata",
    variants=("conv_baseline", "sdc"),
    seeds=(0,),
    n_source=(48, 4, 16),
    n_target=(32, 4, 16),
    pretrain_epochs=10,
    finetune_epochs=15,
)

table = run_plan(plan, log=lambda m: print("  " + m))

print()
print((plan.results_dir() / "table.txt").read_text())
print("cells and CSVs under:", plan.results_dir())
