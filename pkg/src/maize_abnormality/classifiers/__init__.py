"""Window classifiers: PCA/LDA/SVM, the attention-head CNN and their OR-fusion.

The CNN lives in :mod:`maize_abnormality.classifiers.cnn` and is imported
on demand since it pulls in torch.
"""

from .fusion import OrFusionClassifier, WindowPrediction, fuse_labels, predict_windows
from .svm import PcaLdaSvmClassifier, SvmConfig, train_svm

__all__ = [
    "OrFusionClassifier",
    "PcaLdaSvmClassifier",
    "SvmConfig",
    "WindowPrediction",
    "fuse_labels",
    "predict_windows",
    "train_svm",
]
