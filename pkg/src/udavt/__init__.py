"""Two-phase unsupervised domain adaptation for a small video transformer.

Subpackages of note: :mod:`udavt.tensor` (numpy autodiff), :mod:`udavt.model`,
:mod:`udavt.alignment` (cross-correlation loss, pairing, feature queue),
:mod:`udavt.baselines`, :mod:`udavt.synth`, :mod:`udavt.trainer`,
:mod:`udavt.cli`.
"""

__version__ = "0.1.0"
