"""Cross-lingual hate-speech classification toolkit.

Frozen encoders produce pooled features; a small head is trained on top of
them with class-weighted cross-entropy and evaluated across EN/FR pairs.
"""

__version__ = "0.1.0"

HATEFUL = 1
NOT_HATEFUL = 0
