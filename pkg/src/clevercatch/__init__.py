"""CleverCatch: rule-guided weak supervision for prescriber fraud detection.

Pipeline stages: parse weighted domain rules and claims tables, build
rule-contrast features, pretrain rule/sample encoders on synthetic triplets,
align sample embeddings to rule embeddings with entropic optimal transport to
obtain calibrated pseudo-labels, then train a detector on a hybrid
supervised + alignment objective. A claims simulator with planted fraud and a
command-line front end round out the package.
"""

__version__ = "0.1.0"
