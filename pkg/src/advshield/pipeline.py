"""The deployed detection pipeline and its on-disk manifest.

A pipeline bundles the victim classifier, an ordered list of latent
defenders, an optional input-space defender, and the fusion model that
turns their flags into a single verdict.  The manifest is one JSON file
referencing every artifact by relative path, so a directory containing
``manifest.json`` plus the artifacts is a complete, reproducible
deployment.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import fusion as fusion_mod
from . import nn
from .errors import ValidationError
from .latent import LatentDefender, load_defender, save_defender
from .sparse import InputDefender, load_dictionary, save_dictionary
from .validation import as_image_batch

MANIFEST_FORMAT_VERSION = 1


@dataclass
class DetectionResult:
    predicted: np.ndarray      # victim labels
    flags: np.ndarray          # (samples, defenders) bool
    probability: np.ndarray    # noisy-OR per sample
    reject: np.ndarray         # final verdicts


@dataclass
class DetectionPipeline:
    victim: nn.Network
    latent_defenders: list = field(default_factory=list)
    input_defender: InputDefender = None
    fusion_model: fusion_mod.FusionModel = None
    sp: float = 5.0

    def __post_init__(self):
        if not self.latent_defenders and self.input_defender is None:
            raise ValidationError("pipeline needs at least one defender")
        self.set_sp(self.sp)

    # -- structure ----------------------------------------------------------

    @property
    def n_defenders(self):
        return len(self.latent_defenders) + (self.input_defender is not None)

    def defender_names(self):
        names = [f"latent_{i}" for i in range(len(self.latent_defenders))]
        if self.input_defender is not None:
            names.append("input")
        return names

    def set_sp(self, sp):
        for defender in self.latent_defenders:
            defender.set_sp(sp)
        if self.input_defender is not None:
            self.input_defender.set_sp(sp)
        self.sp = float(sp)

    def truncated(self, n_latent, keep_input=True):
        """A shallow view with fewer defenders (fusion must be redone)."""
        return DetectionPipeline(
            self.victim, self.latent_defenders[:n_latent],
            self.input_defender if keep_input else None, None, self.sp)

    # -- scoring and detection ----------------------------------------------

    def predict(self, images):
        return nn.predict(self.victim, as_image_batch(images))

    def defender_scores(self, images, predicted=None):
        """Per-defender raw scores (distances, PSNRs) for SP sweeps."""
        images = as_image_batch(images)
        if predicted is None:
            predicted = self.predict(images)
        scores = [d.distances(images, predicted)
                  for d in self.latent_defenders]
        if self.input_defender is not None:
            scores.append(self.input_defender.scores(images, predicted))
        return predicted, scores

    def flags_from_scores(self, scores, predicted, sp=None):
        sp = self.sp if sp is None else sp
        cols = [d.flags_from_scores(s, predicted, sp)
                for d, s in zip(self.latent_defenders, scores)]
        if self.input_defender is not None:
            cols.append(self.input_defender.flags_from_scores(
                scores[-1], predicted, sp))
        return np.column_stack(cols)

    def defender_flags(self, images, predicted=None):
        predicted, scores = self.defender_scores(images, predicted)
        return predicted, self.flags_from_scores(scores, predicted)

    def calibrate(self, benign_images, adversarial_images,
                  calibration_attacks=()):
        """Estimate per-defender reliabilities from calibration sets."""
        _, benign = self.defender_flags(benign_images)
        _, adv = self.defender_flags(adversarial_images)
        self.fusion_model = fusion_mod.calibrate(benign, adv,
                                                 calibration_attacks)
        return self.fusion_model

    def detect(self, images):
        """Victim labels plus fused adversarial verdicts per sample."""
        if self.fusion_model is None:
            raise ValidationError(
                "pipeline is not calibrated; run calibrate first")
        predicted, flags = self.defender_flags(images)
        prob = fusion_mod.noisy_or(flags.astype(np.int64), self.fusion_model)
        prob = np.atleast_1d(prob)
        reject = fusion_mod.decide(prob, self.fusion_model.decision_threshold)
        return DetectionResult(predicted, flags, prob, reject)


# --- manifest I/O ----------------------------------------------------------

def save_pipeline(pipeline, directory, dataset=None, seed=None,
                  manifest_name="manifest.json"):
    """Write every artifact plus the manifest into ``directory``.

    Returns the manifest path.  ``dataset`` is an optional free-form
    descriptor dict (data file paths, attack provenance) stored verbatim.
    """
    os.makedirs(directory, exist_ok=True)
    victim_file = "victim.json"
    nn.save(pipeline.victim, os.path.join(directory, victim_file))
    defender_files = []
    for i, defender in enumerate(pipeline.latent_defenders):
        name = f"defender_{i}.json"
        save_defender(defender, os.path.join(directory, name))
        defender_files.append(name)
    doc = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "sp": pipeline.sp,
        "victim": victim_file,
        "latent_defenders": defender_files,
        "input_defender": None,
        "fusion": None,
        "dataset": dataset if dataset is not None else {},
        "seed": seed,
    }
    if pipeline.input_defender is not None:
        dict_files = []
        for d in pipeline.input_defender.dictionaries:
            name = f"dictionary_{d.class_id}.json"
            save_dictionary(d, os.path.join(directory, name))
            dict_files.append(name)
        doc["input_defender"] = {
            "dictionaries": dict_files,
            "sparsity": pipeline.input_defender.sparsity,
            "tol": pipeline.input_defender.tol,
        }
    if pipeline.fusion_model is not None:
        doc["fusion"] = {
            "defender_order": pipeline.defender_names(),
            "reliabilities": [float(p) for p in
                              pipeline.fusion_model.reliabilities],
            "decision_threshold":
                pipeline.fusion_model.decision_threshold,
            "calibration_attacks":
                list(pipeline.fusion_model.calibration_attacks),
        }
    path = os.path.join(directory, manifest_name)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
    return path


def load_pipeline(manifest_path):
    """Rebuild a pipeline from a manifest; thresholds follow manifest SP."""
    with open(manifest_path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise ValidationError(
            f"unsupported manifest format_version "
            f"{doc.get('format_version')!r}")
    base = os.path.dirname(os.path.abspath(manifest_path))

    def resolve(name):
        path = os.path.join(base, name)
        if not os.path.exists(path):
            raise ValidationError(f"manifest references missing file {name}")
        return path

    victim = nn.load(resolve(doc["victim"]))
    defenders = [load_defender(resolve(name))
                 for name in doc["latent_defenders"]]
    input_defender = None
    if doc.get("input_defender"):
        sub = doc["input_defender"]
        dictionaries = [load_dictionary(resolve(name))
                        for name in sub["dictionaries"]]
        input_defender = InputDefender(
            dictionaries, sparsity=int(sub["sparsity"]),
            tol=float(sub["tol"]), sp=float(doc["sp"]))
    fusion_model = None
    if doc.get("fusion"):
        sub = doc["fusion"]
        fusion_model = fusion_mod.FusionModel(
            np.array(sub["reliabilities"], dtype=np.float64),
            float(sub.get("decision_threshold", 0.5)),
            list(sub.get("calibration_attacks", [])))
        if fusion_model.n_defenders != (len(defenders)
                                        + (input_defender is not None)):
            raise ValidationError(
                "fusion reliabilities do not match the defender count")
    pipeline = DetectionPipeline(victim, defenders, input_defender,
                                 fusion_model, float(doc["sp"]))
    return pipeline, doc
