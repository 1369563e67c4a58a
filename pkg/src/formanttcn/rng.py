"""Labelled random streams derived from one experiment seed."""
import zlib

import numpy as np

STREAMS = ("init", "dropout", "shuffle", "corpus", "check")


def derive_rng(seed, label):
    """Independent generator for ``label`` (e.g. "init", "dropout", "shuffle")."""
    return np.random.default_rng([int(seed), zlib.crc32(label.encode())])
