"""Teacher / teaching-assistant / student semi-supervised segmentation at desk scale.

Subpackages: ``tensor`` (autodiff), ``segnet`` (network and checkpoints),
``losses``, ``trainers``, ``synthdata`` (phantoms and file formats),
``metrics``, ``stats``, ``experiment``, ``report``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
