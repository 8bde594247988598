"""Scoring and ranking of speech-corpus curation pipelines.

Modules: :mod:`~pipescore.corpus` (manifests, snapshots, audio),
:mod:`~pipescore.dsp` (WADA-SNR, YIN F0, MFCC, MCD), :mod:`~pipescore.sidecar`
(external per-utterance scores), :mod:`~pipescore.vad`, :mod:`~pipescore.tpe`,
:mod:`~pipescore.scoring`, :mod:`~pipescore.sweep`, :mod:`~pipescore.synth`
and :mod:`~pipescore.cli`.
"""

__version__ = "0.1.0"
