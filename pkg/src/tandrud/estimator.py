"""Scikit-learn style estimator around the cascade model and its trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Cascade
from .exceptions import ConfigError
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .trainer import (DiffusionTree, Metrics, TrainConfig, evaluate, infer_tree,
                      predict_instances, train)
from .validation import check_corpus, check_embeddings, check_instances, check_positive


class TanDrud(BaseEstimator):
    """Next-activated-user predictor with dual-role, topology-aware attention.

    ``fit`` takes a :class:`~tandrud.data.CascadeCorpus`; prediction methods take
    prefix instances, cascades or a corpus. With ``use_topology=False`` the
    model is the topology-free ablation and no embeddings are needed.

    Parameters
    ----------
    d : int
        Size of the sender and receiver embeddings.
    n_bins : int
        Number of time-decay intervals.
    lr, l2, dropout_keep : float
        Adam learning rate, L2 weight and dropout keep probability.
    max_len : int
        Cascades are truncated to this many events for training/evaluation.
    """

    def __init__(self, d=64, n_bins=50, lr=1e-3, l2=1e-5, dropout_keep=0.8,
                 use_topology=True, raw_logit_adjust=False, max_len=200, batch_size=32,
                 max_epochs=200, patience=10, mask_observed=False, seed=0):
        self.d = d
        self.n_bins = n_bins
        self.lr = lr
        self.l2 = l2
        self.dropout_keep = dropout_keep
        self.use_topology = use_topology
        self.raw_logit_adjust = raw_logit_adjust
        self.max_len = max_len
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.mask_observed = mask_observed
        self.seed = seed

    def model_config(self) -> ModelConfig:
        return ModelConfig(use_topology=self.use_topology, dropout_keep=self.dropout_keep,
                           l2_lambda=self.l2, max_len=self.max_len,
                           raw_logit_adjust=self.raw_logit_adjust)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, max_epochs=self.max_epochs, patience=self.patience,
                           batch_size=self.batch_size, seed=self.seed)

    def fit(self, X, y=None, *, X_valid=None, embeddings=None, on_epoch=None):
        corpus = check_corpus(X)
        check_positive("d", self.d)
        check_positive("n_bins", self.n_bins)
        model_cfg, train_cfg = self.model_config(), self.train_config()
        if X_valid is None:
            n_valid = max(1, corpus.n_cascades // 10)
            perm = np.random.default_rng(self.seed).permutation(corpus.n_cascades)
            X_valid = corpus.subset(sorted(perm[:n_valid].tolist()))
            corpus = corpus.subset(sorted(perm[n_valid:].tolist()))
        valid = check_corpus(X_valid)
        topo = None
        d_g = 1
        if self.use_topology:
            if embeddings is None:
                raise ConfigError("use_topology=True needs topological embeddings")
            topo = check_embeddings(embeddings, corpus.n_users)
            d_g = topo.shape[1]
        params = init_params(corpus.n_users, self.d, d_g, self.n_bins, self.seed)
        result = train(corpus, valid, params, model_cfg, train_cfg, topo=topo, on_epoch=on_epoch)
        self.params_ = result.params
        self.history_ = result.history
        self.timings_ = result.timings
        self.best_epoch_ = result.best_epoch
        self.stop_reason_ = result.stop_reason
        self.topo_ = topo
        self.t_max_ = corpus.t_max
        self.n_users_ = corpus.n_users
        self.vocab_digest_ = corpus.vocab.digest()
        return self

    def _instances(self, X):
        return check_instances(X, self.n_users_, self.max_len)

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return predict_instances(self.params_, self._instances(X), self.model_config(),
                                 self.t_max_, self.topo_, self.mask_observed)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def evaluate(self, X, mask_observed=None) -> Metrics:
        check_is_fitted(self, "params_")
        mask = self.mask_observed if mask_observed is None else mask_observed
        return evaluate(self._instances(X), self.params_, self.model_config(), self.t_max_,
                        self.topo_, mask)

    def score(self, X, y=None) -> float:
        """Mean reciprocal rank of the true next users."""
        return self.evaluate(X).rr

    def infer_tree(self, cascade: Cascade) -> DiffusionTree:
        check_is_fitted(self, "params_")
        return infer_tree(cascade, self.params_, self.model_config(), self.t_max_, self.topo_)

    def save(self, path, extra=None):
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, self.model_config(), vocab_digest=self.vocab_digest_,
                        t_max=self.t_max_, topo=self.topo_, extra=extra)

    @classmethod
    def load(cls, path, vocab_digest=None) -> "TanDrud":
        params, cfg, meta, topo = load_checkpoint(path, vocab_digest)
        est = cls(d=params.d, n_bins=params.n_bins, l2=cfg.l2_lambda, dropout_keep=cfg.dropout_keep,
                  use_topology=cfg.use_topology, raw_logit_adjust=cfg.raw_logit_adjust,
                  max_len=cfg.max_len)
        est.params_ = params
        est.topo_ = topo
        est.t_max_ = meta["t_max"]
        est.n_users_ = params.n_users
        est.vocab_digest_ = meta["vocab_digest"]
        est.history_ = []
        return est
