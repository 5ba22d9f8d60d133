"""Deterministic simulator of the FIDO2 key-handle timing side channel."""

from .attack import (
    AttackObservation,
    Filler,
    LinkVerdict,
    ProbePlan,
    ThresholdClassifier,
    attach_audio_oracle,
    build_probe_list,
    decide_link,
    fit_threshold,
    run_attack,
)
from .authenticator import Authenticator, AuthenticatorProfile, Scheme
from .client import ClientProfile, Outcome, UserPresenceModel, credentials_get
from .harness import Scenario, calibrate, emit_report, run_scenario
from .profiles import load_authenticator_profile, load_client_profile
from .sim import SimClock

__version__ = "0.1.0"
