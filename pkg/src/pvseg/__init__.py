"""Promptable video segmentation: a small trainable tracker that segments a
user-indicated object across a video from clicks, boxes, or masks, propagating
masks through a relevance-selected memory of past frames.

Subsystems:

- ``data_synth``          deterministic synthetic moving-shape videos + dataset IO
- ``encoder``             hierarchical image encoder (4-stage feature pyramid)
- ``tfi``                 temporal feature integrator (video branch + fusion)
- ``memory``              memory encoder, relevance-based selector, memory attention
- ``mpg``                 memory prompt tokens via masked cross-attention
- ``prompting_decoding``  prompt encoder + two-way transformer mask decoder
- ``model``               full per-object tracker tying the pieces together
- ``training``            losses, interactive prompt simulation, train loop
- ``evaluation``          J&F metric, online/offline/semi-VOS protocols, robot user
- ``service`` / ``cli``   HTTP session service and command-line entry points
"""

__version__ = "0.1.0"
