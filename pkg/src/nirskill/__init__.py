"""nirskill: motor-skill classification from raw fNIRS signals.

Subpackages and modules:
  data        montage, dataset manifest, region projection, exclusion rules
  preprocess  optical density, band-pass, motion correction, Beer-Lambert
  synth       labeled synthetic fNIRS forward model with known ground truth
  nn          reverse-mode kernels: conv1d, SE attention, losses, Adam
  model       encoder-decoder assembly, classifier head, weight files
  train       masked self-supervised pretraining and classifier training
  evaluate    metrics, ROC/PR, k-fold and LOSO CV, Wilcoxon comparison
  cli         command-line pipelines
"""

__version__ = "0.1.0"
