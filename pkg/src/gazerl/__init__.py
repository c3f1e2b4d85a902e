"""gazerl: return-guided foveal attention for pixel-based RL.

The package is organized bottom-up:

- tensor / gradcheck: numpy reverse-mode autodiff and its numeric oracle
- nn: layers, initializers, Adam, gradient clipping
- perception: conv backbone, foveal gaze head, patch-attention baseline
- contrastive: feature buffer, kNN, return-guided triplet mining, losses
- envs: bundled 2-d pixel push task (clean and cluttered)
- rl: PPO with GAE and the auxiliary attention loss
- config / harness / cli: experiment configs, runners, command line
"""

__version__ = "0.1.0"

from .tensor import DTensor, Graph, ShapeError, no_grad  # noqa: F401
