"""Scikit-learn style front doors for the package.

Two estimators cover the common workflows: :class:`VictimClassifier`
trains the plain classifier, and :class:`AdversarialDetector` builds the
whole defense (victim if needed, latent defender chain, input defender,
calibration) behind the usual ``fit`` / ``predict`` /
``decision_function`` surface.  Everything they produce is the same
artifact objects the lower-level modules and the CLI use.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import attacks, latent, nn, sparse
from .arch import DEFAULT_ARCH, build_network, parse_arch
from .data import Dataset, split
from .errors import ValidationError
from .pipeline import DetectionPipeline
from .validation import as_image_batch, as_label_array


class VictimClassifier(BaseEstimator, ClassifierMixin):
    """Train-and-predict wrapper for the victim network."""

    def __init__(self, arch=DEFAULT_ARCH, learning_rate=0.1, batch_size=64,
                 epochs=3, seed=0):
        self.arch = arch
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def fit(self, X, y):
        X = as_image_batch(X)
        spec = parse_arch(self.arch)
        if X.shape[1:] != spec.input_shape:
            raise ValidationError(
                f"data shape {X.shape[1:]} does not match architecture "
                f"input {spec.input_shape}")
        network = build_network(spec, seed=self.seed)
        num_classes = network.output_shape[-1]
        y = as_label_array(y, num_classes=num_classes)
        cfg = nn.TrainConfig(self.learning_rate, self.batch_size,
                             self.epochs, self.seed)
        _, trace = nn.train(network, X, y, cfg)
        self.network_ = network
        self.loss_trace_ = trace
        self.classes_ = np.arange(num_classes)
        return self

    def predict(self, X):
        self._check_fitted()
        return nn.predict(self.network_, as_image_batch(X))

    def predict_proba(self, X):
        self._check_fitted()
        logits, _, _ = nn.forward(self.network_, as_image_batch(X))
        shifted = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        return expd / expd.sum(axis=1, keepdims=True)

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise ValidationError("classifier is not fitted yet")


class AdversarialDetector(BaseEstimator):
    """Full detection pipeline with a fit/predict surface.

    ``fit(X, y)`` takes benign labelled images, splits them internally
    into train / profile / calibration parts, trains the victim (unless
    one is supplied), builds ``n_latent`` chained latent defenders and
    optionally the per-class dictionary defender, and calibrates fusion
    reliabilities against the configured attacks.  ``predict`` returns 1
    for samples judged adversarial, ``decision_function`` the fused
    probability.
    """

    def __init__(self, victim=None, arch=DEFAULT_ARCH, n_latent=1,
                 use_input_defender=True, sp=5.0, gamma=0.01,
                 eta_scale=0.1, n_atoms=225, beta=0.15, dict_iterations=5,
                 omp_sparsity=8, omp_tol=1e-4, patch_size=8, stride=4,
                 patch_cap=1200, victim_learning_rate=0.1,
                 defender_learning_rate=0.01, victim_epochs=3,
                 defender_epochs=10, batch_size=64, profile_fraction=0.2,
                 calibration_fraction=0.1,
                 calibration_attacks=("fgs:eps=0.1",
                                      "bim:step=0.002,iters=50"),
                 seed=0):
        self.victim = victim
        self.arch = arch
        self.n_latent = n_latent
        self.use_input_defender = use_input_defender
        self.sp = sp
        self.gamma = gamma
        self.eta_scale = eta_scale
        self.n_atoms = n_atoms
        self.beta = beta
        self.dict_iterations = dict_iterations
        self.omp_sparsity = omp_sparsity
        self.omp_tol = omp_tol
        self.patch_size = patch_size
        self.stride = stride
        self.patch_cap = patch_cap
        self.victim_learning_rate = victim_learning_rate
        self.defender_learning_rate = defender_learning_rate
        self.victim_epochs = victim_epochs
        self.defender_epochs = defender_epochs
        self.batch_size = batch_size
        self.profile_fraction = profile_fraction
        self.calibration_fraction = calibration_fraction
        self.calibration_attacks = calibration_attacks
        self.seed = seed

    def fit(self, X, y):
        X = as_image_batch(X)
        if self.n_latent < 0 or (self.n_latent == 0
                                 and not self.use_input_defender):
            raise ValidationError("configure at least one defender")
        ds = Dataset(X, np.asarray(y), tag="fit")
        train_frac = 1.0 - self.profile_fraction - self.calibration_fraction
        if train_frac <= 0:
            raise ValidationError("profile and calibration fractions leave "
                                  "no training data")
        parts = split(ds, {"train": train_frac,
                           "profile": self.profile_fraction,
                           "calibrate": self.calibration_fraction},
                      seed=self.seed)
        train, profile, calib = (parts["train"], parts["profile"],
                                 parts["calibrate"])

        victim = self.victim
        if victim is None:
            clf = VictimClassifier(self.arch, self.victim_learning_rate,
                                   self.batch_size, self.victim_epochs,
                                   self.seed)
            clf.fit(train.images, train.labels)
            victim = clf.network_
        self.victim_ = victim

        defenders = []
        if self.n_latent:
            cfg = nn.TrainConfig(self.defender_learning_rate,
                                 self.batch_size, self.defender_epochs,
                                 self.seed)
            defenders = latent.build_chain(
                victim, train.images, train.labels, profile.images,
                self.n_latent, cfg, eta_scale=self.eta_scale, sp=self.sp,
                gamma=self.gamma)

        input_defender = None
        if self.use_input_defender:
            patch = sparse.PatchConfig(self.patch_size, self.stride,
                                       self.patch_cap)
            dictionaries = sparse.learn_class_dictionaries(
                train.images, train.labels, train.num_classes, patch=patch,
                n_atoms=self.n_atoms, beta=self.beta,
                iterations=self.dict_iterations, seed=self.seed)
            input_defender = sparse.InputDefender(
                dictionaries, sparsity=self.omp_sparsity, tol=self.omp_tol,
                sp=self.sp)
            sparse.profile_input_defender(
                input_defender, profile.images,
                nn.predict(victim, profile.images))

        pipeline = DetectionPipeline(victim, defenders, input_defender,
                                     None, self.sp)
        configs = [attacks.parse_attack(a) for a in self.calibration_attacks]
        adv_parts = [attacks.generate(victim, calib.images, calib.labels, c)
                     for c in configs]
        pipeline.calibrate(calib.images, np.concatenate(adv_parts),
                           [c.describe() for c in configs])
        self.pipeline_ = pipeline
        return self

    def decision_function(self, X):
        self._check_fitted()
        return self.pipeline_.detect(X).probability

    def predict(self, X):
        """1 = adversarial (reject), 0 = accept."""
        self._check_fitted()
        return self.pipeline_.detect(X).reject.astype(np.int64)

    def _check_fitted(self):
        if not hasattr(self, "pipeline_"):
            raise ValidationError("detector is not fitted yet")
