"""Multi-task rumor classification built on a co-trained text VAE.

Subpackages cover the tensor engine (``autodiff``), LSTM sequence models
(``lstm``), the tweet text pipeline (``text``), the variational
autoencoder (``vae``), per-task classification heads (``heads``), the
training engine (``training``), evaluation (``metrics``), checkpoint
serialization (``checkpoint``) and a scikit-learn style estimator
(``estimator``).  The command line lives in ``vroc.cli``.
"""

__version__ = "0.1.0"

from vroc.estimator import RumorClassifier

__all__ = ["RumorClassifier", "__version__"]
