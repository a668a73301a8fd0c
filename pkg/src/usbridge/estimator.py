"""scikit-learn style front end over the training and inference modules."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state

from .data import Snapshot, TimeSeriesDataset
from .evaluation import w1
from .inference import branching_trajectory, continuous_trajectory
from .training import TrainConfig, train


def _split_by_time(X, times, sample_weight):
    X = check_array(X, dtype=np.float64, ensure_min_samples=2)
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    if times.shape[0] != X.shape[0]:
        raise ValueError(f"times has {times.shape[0]} entries, X has {X.shape[0]} rows")
    if not np.all(np.isfinite(times)):
        raise ValueError("times must be finite")
    if sample_weight is None:
        sample_weight = np.ones(X.shape[0])
    sample_weight = np.asarray(sample_weight, dtype=np.float64).reshape(-1)
    if sample_weight.shape[0] != X.shape[0]:
        raise ValueError("sample_weight must have one entry per row")
    uniq = np.unique(times)
    if len(uniq) < 2:
        raise ValueError("need observations at two or more distinct times")
    return TimeSeriesDataset([Snapshot(float(t), X[times == t], sample_weight[times == t]) for t in uniq])


class UnbalancedSchrodingerBridge(BaseEstimator):
    """Learn drift, growth and score fields from weighted snapshot data.

    Parameters
    ----------
    delta : float
        Transport range of the WFR cost; mass further apart than
        ``pi * delta`` cannot be transported.
    nu : float
        Diffusion scale of the reference process.
    epochs : int
        Number of optimizer steps.
    batch_per_pair : int
        Bridge samples drawn per consecutive snapshot pair and step.
    learning_rate : float
    hidden_width, depth : int
        Architecture shared by the three networks.
    coupling : {'oet', 'product'}
        ``'product'`` replaces the transport plan by the independent coupling.
    minibatch_ot_size : int
        0 solves one full coupling per pair.
    cosine : bool
        Cosine-anneal the learning rate to zero.
    dt : float
        Integration step on the internal clock (one unit per interval).
    random_state : int or None

    Attributes
    ----------
    model_ : ModelTriple
    dataset_ : TimeSeriesDataset
    loss_curve_ : ndarray, shape (epochs,)
    n_features_in_ : int
    times_ : ndarray
        Observation times in original units.
    """

    def __init__(self, delta=1.3, nu=0.001, epochs=1000, batch_per_pair=256, learning_rate=1e-3,
                 hidden_width=256, depth=5, coupling="oet", minibatch_ot_size=0, cosine=False,
                 t_floor=1e-3, eps_entropic=None, dt=0.01, random_state=0):
        self.delta = delta
        self.nu = nu
        self.epochs = epochs
        self.batch_per_pair = batch_per_pair
        self.learning_rate = learning_rate
        self.hidden_width = hidden_width
        self.depth = depth
        self.coupling = coupling
        self.minibatch_ot_size = minibatch_ot_size
        self.cosine = cosine
        self.t_floor = t_floor
        self.eps_entropic = eps_entropic
        self.dt = dt
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        seed = self.random_state
        if seed is None or isinstance(seed, np.random.RandomState):
            seed = int(check_random_state(seed).randint(2**31 - 1))
        cfg = TrainConfig(delta=self.delta, nu=self.nu, epochs=self.epochs,
                          batch_per_pair=self.batch_per_pair, learning_rate=self.learning_rate,
                          seed=int(seed), minibatch_ot_size=self.minibatch_ot_size,
                          t_floor=self.t_floor, hidden_width=self.hidden_width, depth=self.depth,
                          coupling=self.coupling, eps_entropic=self.eps_entropic, cosine=self.cosine)
        cfg.validate()
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        return cfg

    def fit(self, X, times, sample_weight=None):
        """Fit on rows ``X`` observed at ``times`` (one time per row)."""
        return self.fit_dataset(_split_by_time(X, times, sample_weight))

    def fit_dataset(self, dataset: TimeSeriesDataset):
        result = train(dataset, self._config())
        self.model_ = result.model
        self.dataset_ = dataset
        self.couplings_ = result.couplings
        self.loss_curve_ = np.array([row[1] for row in result.loss_log])
        self.n_features_in_ = dataset.dim
        self.times_ = np.asarray(dataset.original_times)
        return self

    # ------------------------------------------------------------ field queries

    def _points(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, model was fit on {self.n_features_in_}")
        return X

    def _internal(self, t):
        return self.dataset_.to_internal(float(t))

    def _clock_rate(self, t):
        """d(internal)/d(original) at original time ``t``."""
        k = int(np.clip(np.searchsorted(self.times_, t, side="right") - 1, 0, len(self.times_) - 2))
        return 1.0 / (self.times_[k + 1] - self.times_[k])

    def predict_growth(self, X, t, units="original"):
        """Growth rate ``g(x, t)``; per original time unit unless ``units='internal'``."""
        X = self._points(X)
        g = self.model_.growth(X, self._internal(t))
        return g * self._clock_rate(t) if units == "original" else g

    def predict_drift(self, X, t, units="original"):
        X = self._points(X)
        v = self.model_.drift(X, self._internal(t))
        return v * self._clock_rate(t) if units == "original" else v

    def predict_score(self, X, t):
        X = self._points(X)
        return self.model_.score(X, self._internal(t))

    # -------------------------------------------------------------- simulation

    def simulate(self, X=None, times=None, mode="continuous", sample_weight=None,
                 random_state=None, max_population=1_000_000):
        """Push a start cloud through the learned dynamics.

        ``X`` defaults to the first fitted snapshot; ``times`` (original
        units) default to all later observation times. Returns a list of
        WeightedCloud with ``time`` in original units; branching mode also
        returns the LineageTree.
        """
        check_is_fitted(self, "model_")
        s0 = self.dataset_.snapshots[0]
        if X is None:
            X, sample_weight = s0.points, s0.weights if sample_weight is None else sample_weight
        X = self._points(X)
        times = self.times_[1:] if times is None else np.atleast_1d(np.asarray(times, dtype=np.float64))
        internal = [self._internal(t) for t in times]
        seed = self.random_state if random_state is None else random_state
        rng = np.random.default_rng(seed if isinstance(seed, (int, np.integer)) else None)
        span = (0.0, max(internal))
        if mode == "continuous":
            clouds = continuous_trajectory(self.model_, X, span, self.dt, rng, internal, sample_weight)
            tree = None
        elif mode == "branching":
            clouds, tree = branching_trajectory(self.model_, X, span, self.dt, rng, max_population,
                                                record_times=internal)
        else:
            raise ValueError("mode must be 'continuous' or 'branching'")
        for c, t in zip(clouds, sorted(times)):
            c.time = float(t)
        return clouds if tree is None else (clouds, tree)

    def transform(self, X, t_end=None):
        """Positions of ``X`` (taken at the first time) after flowing to ``t_end``."""
        t_end = self.times_[-1] if t_end is None else t_end
        return self.simulate(X, [t_end])[0].points

    def predict(self, X, t_end=None):
        """Mass multiplier accumulated by each point of ``X`` up to ``t_end``."""
        t_end = self.times_[-1] if t_end is None else t_end
        return self.simulate(X, [t_end], sample_weight=np.ones(len(X)))[0].weights

    def score(self, X, times, sample_weight=None):
        """Negative mean W1 between simulated and observed later snapshots."""
        check_is_fitted(self, "model_")
        ds = _split_by_time(X, times, sample_weight)
        later = [s for s in ds.snapshots if s.time > self.times_[0]]
        if not later:
            raise ValueError("no observations after the first fitted time")
        clouds = self.simulate(times=[s.time for s in later])
        return -float(np.mean([w1(c, s) for c, s in zip(clouds, later)]))
