"""
Interaction loop between a learning principal and a simulated agent.

The environment owns the ground truth. Learners deploy mechanisms through
:class:`Environment` and only ever read the transcript through
:func:`delay_guard`, which hides records before their release round.
"""

import json
import logging
import math
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TextIO

import numpy as np

from .agent import (
    AgentModel,
    action_table,
    myopic_actions,
    myopic_reports,
    report_types,
    respond_actions,
)
from .constants import LabConstants
from .exceptions import (
    DimensionError,
    HorizonExhaustedError,
    ProtocolViolationError,
    RotationRetry,
)
from .geometry import Isometry, inradius, make_isometry
from .lp import solve_lp_star
from .model import (
    Mechanism,
    ProblemInstance,
    RewardAngles,
    RewardProfile,
    dummy_mechanism,
    reward_angles,
    reward_profile,
    sample_categorical,
    validate_mechanism,
)
from .state_machine import LearnerPhase, PhaseMachine

logger = logging.getLogger(__name__)

NEVER: int = np.iinfo(np.int64).max


@dataclass
class TraceLog:
    """
    JSON-lines trace of learner stages.

    Events are kept in memory and, when a path is given, appended to the file
    as they arrive.
    """

    path: Path | None = None
    events: list[dict[str, Any]] = field(default_factory=list)
    _handle: TextIO | None = field(default=None, repr=False)

    def write(self, **event: Any) -> None:
        self.events.append(event)
        if self.path is None:
            return
        if self._handle is None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = self.path.open("a", encoding="utf-8")
        self._handle.write(json.dumps(event, default=float) + "\n")

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None


@dataclass(frozen=True, eq=False)
class RoundRecord:
    t: int
    mechanism: Mechanism
    report: int
    action: int
    outcome: int
    reward: float
    release_round: int
    phase: LearnerPhase


@dataclass(frozen=True, eq=False)
class RoundBlock:
    """Consecutive rounds played under one mechanism."""

    start: int
    mechanism: Mechanism
    phase: LearnerPhase
    reports: np.ndarray
    actions: np.ndarray
    outcomes: np.ndarray
    rewards: np.ndarray
    release_rounds: np.ndarray

    @property
    def stop(self) -> int:
        return self.start + self.reports.size

    def record(self, t: int) -> RoundRecord:
        k = t - self.start
        return RoundRecord(
            t=t,
            mechanism=self.mechanism,
            report=int(self.reports[k]),
            action=int(self.actions[k]),
            outcome=int(self.outcomes[k]),
            reward=float(self.rewards[k]),
            release_round=int(self.release_rounds[k]),
            phase=self.phase,
        )


@dataclass(frozen=True, eq=False)
class HiddenBlock:
    """Ground truth of a block, visible to tests and oracles only."""

    start: int
    types: np.ndarray
    agent_actions: np.ndarray
    report_slacks: np.ndarray
    action_slacks: np.ndarray


@dataclass
class OracleChannel:
    true_angles: RewardAngles | None = None
    blocks: list[HiddenBlock] = field(default_factory=list)

    def hidden_types(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0, dtype=int)
        return np.concatenate([block.types for block in self.blocks])


@dataclass
class Transcript:
    u_star: float = 0.0
    blocks: list[RoundBlock] = field(default_factory=list)

    def __len__(self) -> int:
        return self.blocks[-1].stop if self.blocks else 0

    def append(self, block: RoundBlock) -> None:
        if block.start != len(self):
            raise ProtocolViolationError(
                f"Block starts at {block.start} but the transcript has {len(self)} rounds"
            )
        self.blocks.append(block)

    def _block_of(self, t: int) -> RoundBlock:
        for block in self.blocks:
            if block.start <= t < block.stop:
                return block
        raise DimensionError(f"Round {t} is not in the transcript")

    def read(self, t: int, now: int) -> RoundRecord:
        """
        Record of round t as seen at round ``now``.

        Raises:
            ProtocolViolationError: If the record is not released yet
        """
        record = self._block_of(t).record(t)
        if record.release_round > now:
            logger.error(f"Round {t} read at {now} before its release {record.release_round}")
            raise ProtocolViolationError(
                f"Round {t} is released at {record.release_round}, read attempted at {now}"
            )
        return record


@dataclass
class ReleasedHistory:
    """Records of a transcript whose release round has passed."""

    now: int
    _items: list[tuple[RoundBlock, np.ndarray]] = field(default_factory=list)

    def __len__(self) -> int:
        return int(sum(mask.sum() for _, mask in self._items))

    def records(self) -> Iterator[RoundRecord]:
        for block, mask in self._items:
            for k in np.flatnonzero(mask):
                yield block.record(block.start + int(k))

    def get(self, t: int) -> RoundRecord:
        for block, mask in self._items:
            if block.start <= t < block.stop:
                if mask[t - block.start]:
                    return block.record(t)
                break
        raise ProtocolViolationError(f"Round {t} is not released at round {self.now}")

    def reports(self, start: int, stop: int) -> np.ndarray:
        """
        Reports of rounds [start, stop), all of which must be released.

        Raises:
            ProtocolViolationError: If some round in the range is not released
        """
        out = np.full(stop - start, -1, dtype=int)
        for block, mask in self._items:
            lo, hi = max(start, block.start), min(stop, block.stop)
            if lo >= hi:
                continue
            window = slice(lo - block.start, hi - block.start)
            visible = mask[window]
            out[lo - start : hi - start] = np.where(visible, block.reports[window], -1)
        if np.any(out < 0):
            logger.error(f"Rounds [{start}, {stop}) read at {self.now} before release")
            raise ProtocolViolationError(
                f"Rounds [{start}, {stop}) are not all released at round {self.now}"
            )
        return out

    def planning_data(self, since: int = 0) -> list[tuple[Mechanism, float]]:
        """(mechanism, reward) pairs of released planning rounds from round ``since`` on."""
        data = []
        for block, mask in self._items:
            if block.phase is not LearnerPhase.PLANNING or block.stop <= since:
                continue
            for k in np.flatnonzero(mask):
                if block.start + k < since:
                    continue
                data.append((block.mechanism, float(block.rewards[k])))
        return data


def delay_guard(transcript: Transcript, t: int) -> ReleasedHistory:
    """History available to a learner deciding round t."""
    history = ReleasedHistory(now=t)
    for block in transcript.blocks:
        if block.start >= t:
            break
        mask = block.release_rounds <= t
        if mask.any():
            history._items.append((block, mask))
    return history


@dataclass
class RegretLedger:
    """
    Pseudo-regret from exact conditional expectations.

    Regret(t) - Regret(t-1) = u* - E[U | H_t].
    """

    u_star: float = 0.0
    _expected: list[np.ndarray] = field(default_factory=list)

    def add(self, expected_rewards: np.ndarray) -> None:
        self._expected.append(np.asarray(expected_rewards, dtype=float).ravel())

    @property
    def rounds(self) -> int:
        return int(sum(chunk.size for chunk in self._expected))

    def expected_rewards(self) -> np.ndarray:
        if not self._expected:
            return np.zeros(0)
        return np.concatenate(self._expected)

    def per_round(self) -> np.ndarray:
        return self.u_star - self.expected_rewards()

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.per_round())

    @property
    def total(self) -> float:
        return float(self.per_round().sum())


def expected_principal_value(
    inst: ProblemInstance,
    profile: RewardProfile,
    agent: AgentModel,
    mech: Mechanism,
    report_slack: float = 0.0,
    action_slack: float = 0.0,
    t: int | None = None,
) -> float:
    """
    E[U | mechanism, agent] = sum_theta f(theta) sum_x Pi[r(theta), x] U(theta, x, a(theta, x)).
    """
    thetas = np.arange(inst.n_types)
    rounds = None if t is None else np.full(thetas.shape, t)
    reports = report_types(
        agent, profile, mech, thetas, np.full(thetas.shape, report_slack), rounds
    )
    actions = action_table(agent, inst, action_slack)
    payoff = np.take_along_axis(inst.expected_U, actions[..., None], axis=-1)[..., 0]
    return float(np.sum(inst.f[:, None] * mech[reports] * payoff))


def _expected_block_values(
    inst: ProblemInstance,
    profile: RewardProfile,
    agent: AgentModel,
    mech: Mechanism,
    report_slacks: np.ndarray,
    action_slacks: np.ndarray,
    rounds: np.ndarray,
) -> np.ndarray:
    if agent.is_myopic:
        value = expected_principal_value(inst, profile, agent, mech)
        return np.full(rounds.size, value)
    pairs = np.stack([report_slacks, action_slacks], axis=1)
    unique, inverse = np.unique(pairs, axis=0, return_inverse=True)
    values = np.array(
        [expected_principal_value(inst, profile, agent, mech, rs, acs) for rs, acs in unique]
    )
    out = values[inverse.ravel()]
    if agent.script and rounds.size:
        start = int(rounds[0])
        for t in agent.script:
            k = int(t) - start
            if 0 <= k < rounds.size:
                out[k] = expected_principal_value(
                    inst, profile, agent, mech, report_slacks[k], action_slacks[k], int(t)
                )
    return out


def simulate_rounds(
    inst: ProblemInstance,
    profile: RewardProfile,
    agent: AgentModel,
    mech: Mechanism,
    report_slacks: np.ndarray,
    action_slacks: np.ndarray,
    rng: np.random.Generator,
    rounds: np.ndarray,
) -> dict[str, np.ndarray]:
    """
    Play rounds that share one mechanism.

    Each round draws a type, the agent reports a row, the principal draws an
    action from that row, the agent responds and an outcome is drawn.
    """
    size = rounds.size
    types = rng.choice(inst.n_types, size=size, p=inst.f)
    reports = report_types(agent, profile, mech, types, report_slacks, rounds)
    actions = sample_categorical(mech[reports], rng)
    agent_actions = respond_actions(agent, inst, types, actions, action_slacks)
    outcomes = sample_categorical(inst.F[types, actions, agent_actions], rng)
    rewards = inst.U[types, actions, agent_actions, outcomes]
    expected = _expected_block_values(
        inst, profile, agent, mech, report_slacks, action_slacks, rounds
    )
    return {
        "types": types,
        "reports": reports,
        "actions": actions,
        "agent_actions": agent_actions,
        "outcomes": outcomes,
        "rewards": rewards,
        "expected": expected,
    }


def run_round(
    inst: ProblemInstance,
    profile: RewardProfile,
    agent: AgentModel,
    mech: Mechanism,
    slack: float,
    rng: np.random.Generator,
    ledger: RegretLedger,
    t: int = 0,
    release_round: int | None = None,
) -> RoundRecord:
    """
    Play one round and charge its expected regret to the ledger.

    The action slack is the report slack rescaled from normalized to raw
    reward units by 2B / C0.
    """
    mech = validate_mechanism(mech, d=inst.n_actions)
    action_slack = slack * 2.0 * inst.B / profile.C0
    outcome = simulate_rounds(
        inst,
        profile,
        agent,
        mech,
        np.array([slack]),
        np.array([action_slack]),
        rng,
        np.array([t]),
    )
    ledger.add(outcome["expected"])
    return RoundRecord(
        t=t,
        mechanism=mech,
        report=int(outcome["reports"][0]),
        action=int(outcome["actions"][0]),
        outcome=int(outcome["outcomes"][0]),
        reward=float(outcome["rewards"][0]),
        release_round=t + 1 if release_round is None else release_round,
        phase=LearnerPhase.IDLE,
    )


def sample_isometry(
    profile: RewardProfile, rng: np.random.Generator
) -> tuple[Isometry, RewardAngles | None]:
    """
    Draw isometries until the reward angles are in generic position.

    Raises:
        RotationRetry: If every draw within the retry cap is degenerate
    """
    d = profile.d
    if d < 3:
        return make_isometry(d, int(rng.integers(2**31))), None
    last: RotationRetry | None = None
    for _ in range(LabConstants.MAX_ROTATION_RETRIES):
        iso = make_isometry(d, int(rng.integers(2**31)))
        try:
            return iso, reward_angles(profile, iso)
        except RotationRetry as e:
            last = e
    logger.error("No generic isometry found within the retry cap")
    raise RotationRetry("No generic isometry found", last.conditions if last else [])


@dataclass
class Environment:
    """
    Environment for one replication.

    Attributes:
        instance (ProblemInstance): Hidden game
        agent (AgentModel): Agent behavior
        isometry (Isometry): Public isometry used by the learner's geometry
        rng (np.random.Generator): Stream for types, actions and outcomes
        horizon (int | None): Total rounds available, None for unbounded
        trace (TraceLog | None): Optional learner trace
        audit_boundaries (bool): Log queries whose sector edges nearly touch a true angle
    """

    instance: ProblemInstance
    agent: AgentModel
    isometry: Isometry
    rng: np.random.Generator
    horizon: int | None = None
    trace: TraceLog | None = None
    audit_boundaries: bool = True
    profile: RewardProfile = field(init=False)
    u_star: float = field(init=False)
    lp_star_mechanism: Mechanism = field(init=False)
    t: int = field(init=False, default=0)
    transcript: Transcript = field(init=False)
    ledger: RegretLedger = field(init=False)
    oracle: OracleChannel = field(init=False)
    phase: PhaseMachine = field(init=False)

    def __post_init__(self) -> None:
        self.profile = reward_profile(self.instance)
        if self.isometry.d != self.instance.n_actions:
            raise DimensionError(
                f"Isometry dimension {self.isometry.d} does not match d={self.instance.n_actions}"
            )
        solution = solve_lp_star(
            self.instance.f, self.profile.u, self.profile.v_bar, 0.0
        ).require_optimal("LP*")
        self.u_star = float(solution.value)
        self.lp_star_mechanism = solution.mechanism
        self.transcript = Transcript(u_star=self.u_star)
        self.ledger = RegretLedger(u_star=self.u_star)
        angles = None
        if self.instance.n_actions >= 3:
            try:
                angles = reward_angles(self.profile, self.isometry)
            except RotationRetry:
                logger.warning("Environment isometry puts reward angles in a degenerate position")
        self.oracle = OracleChannel(true_angles=angles)
        self.phase = PhaseMachine()
        logger.debug(
            f"Environment ready: |Theta|={self.n_types}, d={self.n_actions}, u*={self.u_star:.6f}"
        )

    @classmethod
    def create(
        cls,
        instance: ProblemInstance,
        agent: AgentModel,
        seed: int,
        horizon: int | None = None,
        trace: TraceLog | None = None,
        isometry: Isometry | None = None,
    ) -> "Environment":
        """Environment with a generic isometry and play stream derived from one seed."""
        iso_seq, play_seq = np.random.SeedSequence(seed).spawn(2)
        if isometry is None:
            isometry, _ = sample_isometry(reward_profile(instance), np.random.default_rng(iso_seq))
        return cls(
            instance=instance,
            agent=agent,
            isometry=isometry,
            rng=np.random.default_rng(play_seq),
            horizon=horizon,
            trace=trace,
        )

    @property
    def n_types(self) -> int:
        return self.instance.n_types

    @property
    def n_actions(self) -> int:
        return self.instance.n_actions

    @property
    def r_d(self) -> float:
        return inradius(self.n_actions)

    @property
    def menu_rows(self) -> int:
        """Rows of an estimation query menu."""
        return max(self.n_types, LabConstants.MIN_MENU_ROWS)

    @property
    def remaining(self) -> float:
        return math.inf if self.horizon is None else self.horizon - self.t

    def deploy(
        self,
        mech: Mechanism,
        rounds: int,
        phase: LearnerPhase,
        delay: int | None = 0,
        head_only: bool = False,
    ) -> np.ndarray:
        """
        Commit to a mechanism for a block of rounds.

        Args:
            mech (Mechanism): Menu with one row per possible report
            rounds (int): Block length
            phase (LearnerPhase): Phase tag of the block
            delay (int | None): Rounds after the block before its data is released;
                None never releases it
            head_only (bool): Release only the first round, ``delay`` rounds after it

        Raises:
            HorizonExhaustedError: If the block runs past the horizon

        Returns:
            np.ndarray: Reports of the block's rounds
        """
        mech = validate_mechanism(mech, d=self.n_actions)
        if rounds <= 0:
            return np.zeros(0, dtype=int)
        if rounds > self.remaining:
            logger.info(f"Block of {rounds} rounds exceeds the {self.remaining} remaining")
            raise HorizonExhaustedError(
                f"Block of {rounds} rounds at t={self.t} exceeds horizon {self.horizon}"
            )
        self.phase.transition_to(phase)

        start = self.t
        ts = np.arange(start, start + rounds)
        release = np.full(rounds, NEVER, dtype=np.int64)
        if delay is not None:
            if head_only:
                release[0] = start + 1 + delay
            else:
                release[:] = start + rounds + delay
        delays = np.where(release == NEVER, np.inf, (release - ts - 1).astype(float))
        report_slacks = self.agent.report_slacks(self.profile, self.instance.gamma, delays)
        action_slacks = self.agent.action_slacks(self.instance, delays)

        played = simulate_rounds(
            self.instance,
            self.profile,
            self.agent,
            mech,
            report_slacks,
            action_slacks,
            self.rng,
            ts,
        )
        mech = mech.copy()
        mech.setflags(write=False)
        self.transcript.append(
            RoundBlock(
                start=start,
                mechanism=mech,
                phase=phase,
                reports=played["reports"],
                actions=played["actions"],
                outcomes=played["outcomes"],
                rewards=played["rewards"],
                release_rounds=release,
            )
        )
        self.oracle.blocks.append(
            HiddenBlock(
                start=start,
                types=played["types"],
                agent_actions=played["agent_actions"],
                report_slacks=report_slacks,
                action_slacks=action_slacks,
            )
        )
        self.ledger.add(played["expected"])
        self.t += rounds
        return played["reports"]

    def dummy(self, rounds: int, phase: LearnerPhase = LearnerPhase.DUMMY) -> None:
        """Uniform mechanism whose data is never used."""
        self.deploy(dummy_mechanism(self.n_types, self.n_actions), rounds, phase, delay=None)

    def released(self) -> ReleasedHistory:
        return delay_guard(self.transcript, self.t)

    def fill(self, mech: Mechanism | None = None, phase: LearnerPhase = LearnerPhase.TAIL) -> None:
        """Play the remaining horizon with one mechanism (uniform if None)."""
        if self.horizon is None or self.remaining <= 0:
            return
        if mech is None:
            mech = dummy_mechanism(self.n_types, self.n_actions)
        self.deploy(mech, int(self.remaining), phase, delay=None)

    def myopic_reports(self, mech: Mechanism) -> np.ndarray:
        """Ground-truth myopic report of each type, for oracles."""
        return myopic_reports(self.profile, mech)

    def myopic_actions(self) -> np.ndarray:
        return myopic_actions(self.instance)
