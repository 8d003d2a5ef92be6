"""Dysarthric speech severity classification with a small numpy network.

Submodules: ``tensor`` (taped autodiff operators), ``dsp`` (waveform to
log-mel image), ``model`` (the network and its ablation presets),
``training`` (weighted loss, Adam, checkpoints, fine-tuning), ``harness``
(manifests, split plans, metrics), ``synth`` (synthetic corpora) and ``cli``.
"""

__version__ = "0.1.0"
