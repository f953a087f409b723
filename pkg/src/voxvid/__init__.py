"""voxvid: volumetric video as hyperspherical-harmonic voxel trees.

Subpackages cover the full pipeline: basis evaluation (hh), temporal
coefficient decoding (temporal), the sparse video octree (octree),
differentiable rendering (render), direct gradient-descent fitting (train),
multi-instance compositing and editing (compose), synthetic datasets and
dataset I/O (synth, datasets), a command-line interface (cli), and an
interactive HTTP/WebSocket edit service (service).
"""

import os as _os

# single-machine workloads; the workqueue layer avoids the TBB version probe
_os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
