"""Desk-scale lab for semi-supervised domain adaptation on 2-D toy data.

A small MLP is pretrained on a source distribution, then adapted to a
shifted target using a handful of labeled feedback points plus unlabeled
data. The lab's two knobs of interest:

- where the labeled feedback comes from (random points, the model's own
  errors, its correct predictions, mixtures, entropy-ranked, or the most
  confident errors), and
- whether each labeled point is accompanied by retrieved "defending"
  samples: confidently pseudo-labeled neighbors that anchor the rest of
  the class while the feedback point pulls the boundary.

Everything is numpy; runs are deterministic per (config, seed). The CLI
(`sdalab`) drives dataset generation, pretraining, adaptation, ablation
sweeps, a streaming protocol, reporting, and SVG boundary plots.
"""

__version__ = "0.1.0"
