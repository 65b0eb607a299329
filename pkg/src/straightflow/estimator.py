"""Scikit-learn style front door.

FlowMatcher.fit(X) learns a generative flow from a standard normal to the
empirical distribution of X by jointly training a velocity field and (for
the non-linear families) the interpolant that straightens its trajectories.
sample() then integrates the learned ODE with a caller-chosen evaluation
budget; straight flows stay accurate even at nfe=1.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import Empirical, Gaussian
from .errors import UsageError
from .interpolants import make_interpolant
from .field import VelocityField
from .numerics import RngStream
from .simulate import integrate, one_step_sample
from .train import AdamState, TrainConfig, TrainState, train_step


class FlowMatcher(BaseEstimator):
    """Generative flow-matching model with a trainable interpolant.

    Parameters mirror the trainer defaults but scaled to estimator-sized
    data; all are plain constructor attributes so sklearn's get_params /
    set_params / clone work unchanged.

    Attributes set by fit: n_features_in_, mean_, scale_, state_.
    """

    def __init__(
        self,
        family: str = "affine_plu",
        lam: float = 0.1,
        steps: int = 2000,
        batch_n: int = 64,
        batch_m: int = 256,
        learning_rate: float = 1e-3,
        nfe: int = 8,
        method: str = "heun",
        standardize: bool = True,
        field_hidden: tuple = (64, 64),
        interp_hidden: tuple = (),
        seed: int = 0,
    ):
        self.family = family
        self.lam = lam
        self.steps = steps
        self.batch_n = batch_n
        self.batch_m = batch_m
        self.learning_rate = learning_rate
        self.nfe = nfe
        self.method = method
        self.standardize = standardize
        self.field_hidden = field_hidden
        self.interp_hidden = interp_hidden
        self.seed = seed

    # fitting ------------------------------------------------------------------

    def _config(self, d: int) -> TrainConfig:
        return TrainConfig(
            seed=self.seed,
            d=d,
            dataset="empirical",  # resolved by hand below, never by name
            family=self.family,
            interp_hidden=tuple(self.interp_hidden),
            field_hidden=tuple(self.field_hidden),
            batch_n=self.batch_n,
            batch_m=self.batch_m,
            steps=self.steps,
            lr_theta=self.learning_rate,
            lr_psi=self.learning_rate,
            lam=self.lam,
            eval_every=0,
            checkpoint_every=0,
        )

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        self.n_features_in_ = X.shape[1]
        if self.standardize:
            self.mean_ = X.mean(axis=0)
            scale = X.std(axis=0)
            self.scale_ = np.where(scale > 0, scale, 1.0)
        else:
            self.mean_ = np.zeros(X.shape[1])
            self.scale_ = np.ones(X.shape[1])
        config = self._config(X.shape[1])
        root = RngStream(config.seed)
        field = VelocityField(
            config.d,
            root.substream("init"),
            hidden=config.field_hidden,
            activation=config.field_activation,
        )
        interp = make_interpolant(
            config.family,
            config.d,
            root.substream("interp"),
            eps_t=config.eps_t,
            hidden=config.interp_hidden or None,
        )
        state = TrainState(
            config=config,
            field=field,
            interp=interp,
            adam_theta=AdamState.zeros(field.params.size),
            adam_psi=AdamState.zeros(interp.psi_dim),
            rng_time=root.substream("time"),
            rng_data=root.substream("data"),
            p0=Gaussian(config.d, 0.0, 1.0),
            p1=Empirical((X - self.mean_) / self.scale_),
        )
        for _ in range(config.steps):
            train_step(state)
        self.state_ = state
        return self

    # sampling -----------------------------------------------------------------

    def _push(self, z0: np.ndarray, nfe, method) -> np.ndarray:
        nfe = self.nfe if nfe is None else int(nfe)
        method = self.method if method is None else method
        if nfe < 1:
            raise UsageError("nfe must be >= 1")
        if nfe == 1:
            z1 = one_step_sample(self.state_.field, z0)
        else:
            z1 = integrate(self.state_.field, z0, nfe, method).endpoints
        return z1 * self.scale_ + self.mean_

    def sample(self, n: int, nfe: int | None = None, method: str | None = None,
               seed: int | None = None) -> np.ndarray:
        """Draw n new points; nfe controls the integration budget."""
        check_is_fitted(self, "state_")
        if n < 1:
            raise UsageError("n must be >= 1")
        rng = RngStream(self.seed if seed is None else seed).substream("sample")
        z0 = self.state_.p0.sample(n, rng)
        return self._push(z0, nfe, method)

    def transform(self, X) -> np.ndarray:
        """Push given source-space (standard normal) points through the
        learned flow into data space; deterministic in X."""
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise UsageError(
                f"expected {self.n_features_in_} features, got {X.shape[1]}"
            )
        return self._push(X, None, None)
