"""Random-walk sequence pretraining for graphs.

Pretrains a from-scratch Transformer encoder on random-walk node contexts
with masked feature reconstruction, then evaluates by in-context few-shot
node classification and fine-tuned link prediction.
"""

__version__ = "0.1.0"
