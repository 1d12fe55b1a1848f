"""Train CR-BPR next to a few ablated variants on one synthetic dataset.

By default one seed and three variants are trained (about a minute).
Pass ``--full`` for every variant averaged over five seeds.
"""

import sys

from crbpr import Dataset, EvalProtocol, Hyperparams, SynthConfig, generate_synthetic, split_triplets
from crbpr.trainer import ABLATIONS, run_ablation

full = "--full" in sys.argv
syn = generate_synthetic(SynthConfig())
data = Dataset(syn.catalog, syn.features, split_triplets(syn.triplets, (0.8, 0.1, 0.1)))
variants = list(ABLATIONS) if full else ["-w/o UC", "-w/o GC", "-w/o FS*"]
seeds = range(5) if full else (0,)

table = run_ablation(data, Hyperparams(), variants, seeds=seeds, protocol=EvalProtocol())
metric_names = [k for k in table[0] if k == "AUC" or "@" in k]
print("variant     " + "  ".join(f"{k:>8}" for k in metric_names))
for row in table:
    print(f"{row['variant']:<11} " + "  ".join(f"{row[k]:8.4f}" for k in metric_names))
