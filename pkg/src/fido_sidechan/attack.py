"""Account-linking timing attack.

The adversary runs service A and holds ``anchor`` (the victim's valid handle
for A) plus ``candidate`` (some handle issued for service B). During
victim-initiated sign-ins it alternates two allowCredentials lists:

    baseline  (t_e):  n filler handles that the token rejects at the MAC check, then anchor
    probe     (t_d):  n copies of candidate, then anchor

If the candidate was issued by the same token, every copy costs a full
decrypt before the origin check rejects it, so t_d exceeds t_e by about n
times the per-handle gap. A midpoint threshold fitted on a 70/30 split of
the calls, plus a majority vote over the held-out probe calls, turns this
into a link / no-link verdict.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .authenticator import Authenticator, AuthenticatorProfile
from .client import ClientProfile, Outcome, UserPresenceModel, credentials_get
from .sim import Drbg, SimClock

ADVERSARY_RP = "service-a.example"
OTHER_RP = "service-b.example"


class Filler(enum.Enum):
    RANDOM = "RANDOM"
    # one random handle repeated n times; survives client-side dedup the same
    # way the candidate list does, so baseline and probe stay comparable
    RANDOM_REPEATED = "RANDOM_REPEATED"
    CANDIDATE = "CANDIDATE"


@dataclass(frozen=True)
class ProbePlan:
    n: int
    filler: Filler
    candidate: bytes
    anchor: bytes
    handle_length: int = 112

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")

    @property
    def composition(self) -> str:
        return f"{self.n}x{self.filler.value}+ANCHOR"


@dataclass(frozen=True)
class AttackObservation:
    plan: ProbePlan
    elapsed: float
    outcome: Outcome
    presence_us: float = 0.0
    presence_onset: Optional[float] = None
    silent_probes: int = 0

    @property
    def timing(self) -> float:
        """The value the adversary classifies: raw elapsed, or elapsed with the
        presence wait removed when the audio channel pinned the button press."""
        if self.presence_onset is None:
            return self.elapsed
        return self.elapsed - self.presence_onset


@dataclass(frozen=True)
class ThresholdClassifier:
    threshold: float
    mean_e: float
    mean_d: float
    test_error: float
    n_train: int
    n_test: int
    train_fraction: float = 0.7

    def predicts_present(self, timing: float) -> bool:
        return timing >= self.threshold


@dataclass(frozen=True)
class LinkVerdict:
    linked: bool
    t_e_mean: float
    t_d_mean: float
    margin: float
    votes: int
    total: int


@dataclass
class Victim:
    """A token holding the anchor, plus candidates the adversary might test."""

    authenticator: Authenticator
    anchor: bytes
    linked_candidate: bytes  # issued by this token for OTHER_RP
    foreign_candidate: bytes  # issued by a different token for OTHER_RP


def make_victim(profile: AuthenticatorProfile, ss: np.random.SeedSequence) -> Victim:
    own, other, jitter = ss.spawn(3)
    token = Authenticator(
        profile,
        Drbg(own.generate_state(8).tobytes()),
        np.random.default_rng(jitter),
    )
    _, anchor = token.make_credential(ADVERSARY_RP)
    _, linked = token.make_credential(OTHER_RP)
    stranger = Authenticator(profile, Drbg(other.generate_state(8).tobytes()))
    _, foreign = stranger.make_credential(OTHER_RP)
    return Victim(token, anchor, linked, foreign)


def build_probe_list(plan: ProbePlan, rng: np.random.Generator) -> list[bytes]:
    if plan.filler is Filler.CANDIDATE:
        fill = [plan.candidate] * plan.n
    elif plan.filler is Filler.RANDOM_REPEATED:
        fill = [rng.bytes(plan.handle_length)] * plan.n
    else:
        fill = [rng.bytes(plan.handle_length) for _ in range(plan.n)]
    return fill + [plan.anchor]


def attach_audio_oracle(
    observation: AttackObservation,
    onset_error_std: float,
    rng: np.random.Generator,
    profile: AuthenticatorProfile,
) -> AttackObservation:
    """Pin the button press from a microphone recording.

    ``presence_onset`` estimates how long the token waited for the press;
    its error is Gaussian with ``onset_error_std``.
    """
    if not profile.audible_button:
        raise ValueError(f"profile {profile.name!r} has no audible button")
    err = rng.normal(0.0, onset_error_std) if onset_error_std > 0 else 0.0
    return replace(observation, presence_onset=observation.presence_us + err)


def run_attack(
    candidate: bytes,
    anchor: bytes,
    n: int,
    trials: int,
    client: ClientProfile,
    authenticator: Authenticator,
    user: UserPresenceModel,
    rng: np.random.Generator,
    *,
    baseline_filler: Filler = Filler.RANDOM,
    audio_error_std: Optional[float] = None,
    rp_id: str = ADVERSARY_RP,
    clock: Optional[SimClock] = None,
    wire_log=None,
) -> tuple[list[AttackObservation], list[AttackObservation]]:
    """Drive ``trials`` baseline/probe call pairs through one victim session.

    The session opens with a plain sign-in on ``anchor`` so the user is
    primed for every measured call. Failed calls yield no observation.
    """
    clock = clock or SimClock()
    handle_length = authenticator.profile.handle_length
    base_plan = ProbePlan(n, baseline_filler, candidate, anchor, handle_length)
    probe_plan = ProbePlan(n, Filler.CANDIDATE, candidate, anchor, handle_length)

    credentials_get(
        [anchor], rp_id, client, authenticator, user, False, clock, rng, wire_log=wire_log
    )

    obs_e: list[AttackObservation] = []
    obs_d: list[AttackObservation] = []
    for _ in range(trials):
        for plan, sink in ((base_plan, obs_e), (probe_plan, obs_d)):
            res = credentials_get(
                build_probe_list(plan, rng),
                rp_id,
                client,
                authenticator,
                user,
                True,
                clock,
                rng,
                wire_log=wire_log,
            )
            if res.outcome is not Outcome.OK:
                continue
            obs = AttackObservation(
                plan, res.elapsed, res.outcome, res.presence_us, None, res.silent_probe_count
            )
            if audio_error_std is not None:
                obs = attach_audio_oracle(obs, audio_error_std, rng, authenticator.profile)
            sink.append(obs)
    return obs_e, obs_d


def split_train_test(items: Sequence, train_fraction: float = 0.7) -> tuple[list, list]:
    """Split by trial order: the first ``train_fraction`` is training data."""
    k = int(round(len(items) * train_fraction))
    return list(items[:k]), list(items[k:])


def _timings(observations) -> np.ndarray:
    return np.array([o.timing if hasattr(o, "timing") else o for o in observations], dtype=float)


def fit_threshold(
    observations_e: Sequence, observations_d: Sequence, train_fraction: float = 0.7
) -> ThresholdClassifier:
    """Midpoint-of-means threshold; ``elapsed >= threshold`` means candidate present.

    Accepts observations or bare timings. The reported error is measured on
    the held-out tail of both classes.
    """
    if len(observations_e) < 10 or len(observations_d) < 10:
        raise ValueError("need at least 10 observations per class")
    tr_e, te_e = split_train_test(_timings(observations_e), train_fraction)
    tr_d, te_d = split_train_test(_timings(observations_d), train_fraction)
    mean_e, mean_d = float(np.mean(tr_e)), float(np.mean(tr_d))
    if not (math.isfinite(mean_e) and math.isfinite(mean_d)):
        raise ValueError("class means are not finite")
    threshold = (mean_e + mean_d) / 2
    te_e, te_d = np.asarray(te_e), np.asarray(te_d)
    wrong = int(np.sum(te_e >= threshold)) + int(np.sum(te_d < threshold))
    n_test = len(te_e) + len(te_d)
    return ThresholdClassifier(
        threshold=threshold,
        mean_e=mean_e,
        mean_d=mean_d,
        test_error=wrong / n_test if n_test else float("nan"),
        n_train=len(tr_e) + len(tr_d),
        n_test=n_test,
        train_fraction=train_fraction,
    )


def decide_link(classifier: ThresholdClassifier, observations_d: Sequence) -> LinkVerdict:
    timings = _timings(observations_d)
    votes = int(np.sum(timings >= classifier.threshold))
    t_d_mean = float(np.mean(timings)) if len(timings) else float("nan")
    return LinkVerdict(
        linked=2 * votes > len(timings),
        t_e_mean=classifier.mean_e,
        t_d_mean=t_d_mean,
        margin=abs(t_d_mean - classifier.threshold),
        votes=votes,
        total=len(timings),
    )


def link_verdict(
    observations_e: Sequence, observations_d: Sequence, train_fraction: float = 0.7
) -> tuple[ThresholdClassifier, LinkVerdict]:
    """Fit on the training calls, vote with the held-out probe calls."""
    clf = fit_threshold(observations_e, observations_d, train_fraction)
    _, held_out = split_train_test(list(observations_d), train_fraction)
    return clf, decide_link(clf, held_out)
