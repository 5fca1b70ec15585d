"""Estimator wrapper around anatomy-aware dense CRF refinement."""

import numpy as np
from sklearn.base import BaseEstimator

from .context import DEFAULT_VECTORS, ContextLabelSet, build_context_map
from .inference import CrfParams, mean_field


class AnatomyCRF(BaseEstimator):
    """Refine FCN class probabilities with a fully connected CRF.

    The context map is built once from the argmax of the incoming
    probabilities. ``use_context=False`` drops the context kernel and
    gives the plain appearance plus smoothness model.

    Parameters mirror :class:`CrfParams`; ``context_vectors`` is a 6x3
    nested sequence (default: the standard anatomy vectors).
    """

    def __init__(
        self,
        w1=0.01,
        w2=0.05,
        w3=0.001,
        sigma_alpha=40.0,
        sigma_beta=0.1,
        sigma_gamma=3.0,
        sigma_tau=40.0,
        sigma_lambda=20.0,
        iterations=10,
        use_context=True,
        context_vectors=DEFAULT_VECTORS,
    ):
        self.w1 = w1
        self.w2 = w2
        self.w3 = w3
        self.sigma_alpha = sigma_alpha
        self.sigma_beta = sigma_beta
        self.sigma_gamma = sigma_gamma
        self.sigma_tau = sigma_tau
        self.sigma_lambda = sigma_lambda
        self.iterations = iterations
        self.use_context = use_context
        self.context_vectors = context_vectors

    @classmethod
    def from_params(cls, params, use_context=True, context_vectors=DEFAULT_VECTORS):
        return cls(**params.to_dict(), use_context=use_context, context_vectors=context_vectors)

    def crf_params(self):
        p = CrfParams.from_dict(self.get_params())
        if not self.use_context:
            p.w3 = 0.0
        return p.validate()

    def fit(self, X=None, y=None):
        # nothing is learned; parameters are set by hand or by search
        self.params_ = self.crf_params()
        self.context_ = ContextLabelSet(self.context_vectors)
        return self

    def refine(self, prob, image):
        """Mean-field result for one image: ``prob [R, H, W]``, ``image [C, H, W]``."""
        if not hasattr(self, "params_"):
            self.fit()
        prob = np.asarray(prob, dtype=np.float64)
        context = None
        if self.params_.w3 > 0:
            context = build_context_map(prob.argmax(axis=0), self.context_)
        return mean_field(prob, image, context, self.params_)

    def predict_proba(self, prob, X):
        """Refined marginals for a batch: ``prob [M, R, H, W]``, ``X [M, C, H, W]``."""
        prob = np.asarray(prob)
        X = np.asarray(X)
        if prob.ndim != 4 or X.ndim != 4 or len(prob) != len(X):
            raise ValueError(f"expected paired [M, R, H, W] and [M, C, H, W] batches, got {prob.shape} and {X.shape}")
        return np.stack([self.refine(p, x).prob for p, x in zip(prob, X)])

    def predict(self, prob, X):
        return self.predict_proba(prob, X).argmax(axis=1)
