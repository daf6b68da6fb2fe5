"""Retrieval-augmented transducer on synthetic speech, built on numpy.

Subpackages cover the numerics (tape autodiff plus jit kernels), the
recurrent language model, the continuation datastore with exact and
quantized nearest-neighbor search, the transducer itself, the retrieval
biasing adapter, corpus synthesis, training, evaluation, and the
experiment harness behind the ``knnt`` command line tool.
"""

__version__ = "0.1.0"
