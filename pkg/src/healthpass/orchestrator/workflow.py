"""State-machine workflow engine with per-stage retries and metrics.

A definition is an ordered list of stages, each bound by name to an
operation adapter (a callable taking the shared context dict and
returning a dict merged into it). Instances advance one attempt per
step(): a failed attempt retries up to the stage's max_attempts with
exponential backoff (fixed multiplier, +/-20% jitter); exhaustion drives
the instance to Failed and later stages never run. Terminal states are
immutable.

Every attempt lands in the instance trace, and replay() re-runs the
transition rules over a recorded trace as a pure function - the engine's
state machine is deterministic given the same attempt outcomes, which is
what the replay check verifies.

Stage timeout_ms is enforced post-hoc: an attempt whose wall-clock
duration exceeds the budget counts as a failed attempt. Adapters run
in-process, so preemption is not attempted.
"""

from __future__ import annotations

import random
import statistics
import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

Adapter = Callable[[dict], Optional[dict]]


class UnknownWorkflow(KeyError):
    """start() named a definition that was never registered."""


class InstanceTerminal(RuntimeError):
    """step() called on a completed or failed instance."""


class UnknownAdapter(KeyError):
    """A stage is bound to an operation name with no registered adapter."""


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 1
    backoff_ms: int = 0

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass(frozen=True)
class StageDef:
    name: str
    op: str
    retry: RetryPolicy = RetryPolicy()
    timeout_ms: Optional[int] = None
    compensate_op: Optional[str] = None


@dataclass(frozen=True)
class WorkflowDefinition:
    name: str
    stages: Tuple[StageDef, ...]
    on_failure: str = "halt"  # "halt" | "compensate"

    def __post_init__(self) -> None:
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise ValueError("stage names must be unique")
        if self.on_failure not in ("halt", "compensate"):
            raise ValueError("on_failure must be 'halt' or 'compensate'")


class InstanceState(str, Enum):
    PENDING = "Pending"
    RUNNING = "Running"
    COMPLETED = "Completed"
    FAILED = "Failed"


@dataclass(frozen=True)
class AttemptRecord:
    stage: str
    attempt: int
    ok: bool
    error: Optional[str]
    duration_ms: float
    at: float


@dataclass
class WorkflowInstance:
    instance_id: str
    definition: str
    state: InstanceState = InstanceState.PENDING
    current_stage: int = 0
    stage_attempts: Dict[str, int] = field(default_factory=dict)
    trace: List[AttemptRecord] = field(default_factory=list)
    context: dict = field(default_factory=dict)
    created_at: float = 0.0
    failed_stage: Optional[str] = None
    failure_reason: Optional[str] = None
    next_retry_backoff_ms: float = 0.0
    _stage_name: Optional[str] = None

    @property
    def terminal(self) -> bool:
        return self.state in (InstanceState.COMPLETED, InstanceState.FAILED)

    @property
    def running_stage(self) -> Optional[str]:
        return self._stage_name

    def describe_state(self) -> str:
        if self.state is InstanceState.RUNNING:
            return f"Running({self.running_stage})"
        if self.state is InstanceState.FAILED:
            return f"Failed({self.failed_stage}, {self.failure_reason})"
        return self.state.value


class WorkflowEngine:
    """Registers definitions and adapters, runs instances, aggregates metrics."""

    def __init__(
        self,
        clock: Callable[[], float] = time.time,
        rng: Optional[random.Random] = None,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        self._clock = clock
        self._rng = rng or random.Random()
        self._sleep = sleeper
        self._definitions: Dict[str, WorkflowDefinition] = {}
        self._adapters: Dict[str, Adapter] = {}
        self._instances: Dict[str, WorkflowInstance] = {}
        self._instance_locks: Dict[str, threading.Lock] = {}
        self._lock = threading.Lock()

    # -- registration -----------------------------------------------------------

    def register_adapter(self, name: str, fn: Adapter) -> None:
        self._adapters[name] = fn

    def register_definition(self, definition: WorkflowDefinition) -> str:
        for stage in definition.stages:
            if stage.op not in self._adapters:
                raise UnknownAdapter(stage.op)
            if stage.compensate_op and stage.compensate_op not in self._adapters:
                raise UnknownAdapter(stage.compensate_op)
        with self._lock:
            self._definitions[definition.name] = definition
        return definition.name

    # -- execution --------------------------------------------------------------

    def start(self, name: str, input_data: dict) -> str:
        with self._lock:
            if name not in self._definitions:
                raise UnknownWorkflow(name)
            instance = WorkflowInstance(
                instance_id=str(uuid.uuid4()),
                definition=name,
                context={"input": dict(input_data), "results": {}},
                created_at=self._clock(),
            )
            self._instances[instance.instance_id] = instance
            self._instance_locks[instance.instance_id] = threading.Lock()
        return instance.instance_id

    def instance(self, instance_id: str) -> WorkflowInstance:
        with self._lock:
            return self._instances[instance_id]

    def step(self, instance_id: str) -> InstanceState:
        """Execute one attempt of the current stage.

        Each instance advances under its own lock, so concurrent
        instances never interleave within a stage.
        """
        with self._lock:
            inst = self._instances[instance_id]
            ilock = self._instance_locks[instance_id]
        with ilock:
            if inst.terminal:
                raise InstanceTerminal(inst.instance_id)
            definition = self._definitions[inst.definition]
            stage = definition.stages[inst.current_stage]
            inst.state = InstanceState.RUNNING
            inst._stage_name = stage.name
            attempt = inst.stage_attempts.get(stage.name, 0) + 1
            inst.stage_attempts[stage.name] = attempt

            started = self._clock()
            ok, error = True, None
            try:
                out = self._adapters[stage.op](inst.context)
                if out:
                    inst.context["results"][stage.name] = out
            except Exception as exc:  # adapter failure is a stage failure
                ok, error = False, f"{type(exc).__name__}: {exc}"
            duration_ms = (self._clock() - started) * 1000.0
            if ok and stage.timeout_ms is not None and duration_ms > stage.timeout_ms:
                ok, error = False, f"Timeout: stage exceeded {stage.timeout_ms} ms"

            inst.trace.append(
                AttemptRecord(stage.name, attempt, ok, error, duration_ms, started)
            )
            self._transition(inst, definition, stage, attempt, ok, error)
            return inst.state

    def _transition(
        self,
        inst: WorkflowInstance,
        definition: WorkflowDefinition,
        stage: StageDef,
        attempt: int,
        ok: bool,
        error: Optional[str],
    ) -> None:
        """Pure state-transition rule shared by live execution and replay."""
        if ok:
            inst.current_stage += 1
            inst.next_retry_backoff_ms = 0.0
            if inst.current_stage >= len(definition.stages):
                inst.state = InstanceState.COMPLETED
                inst._stage_name = None
            return
        if attempt < stage.retry.max_attempts:
            inst.next_retry_backoff_ms = self._backoff_ms(stage.retry, attempt)
            return  # stays Running on the same stage
        inst.state = InstanceState.FAILED
        inst.failed_stage = stage.name
        inst.failure_reason = error
        inst._stage_name = None
        if definition.on_failure == "compensate":
            self._compensate(inst, definition)

    def _compensate(self, inst: WorkflowInstance, definition: WorkflowDefinition) -> None:
        for stage in reversed(definition.stages[: inst.current_stage]):
            if stage.compensate_op:
                try:
                    self._adapters[stage.compensate_op](inst.context)
                except Exception:
                    pass  # compensation is best-effort

    def _backoff_ms(self, retry: RetryPolicy, attempt: int) -> float:
        base = retry.backoff_ms * (2 ** (attempt - 1))
        return base * self._rng.uniform(0.8, 1.2)

    def run(self, instance_id: str) -> WorkflowInstance:
        """Step the instance to a terminal state, honoring retry backoff."""
        inst = self.instance(instance_id)
        while not inst.terminal:
            self.step(instance_id)
            if not inst.terminal and inst.next_retry_backoff_ms > 0:
                self._sleep(inst.next_retry_backoff_ms / 1000.0)
        return inst

    # -- replay -----------------------------------------------------------------

    def replay(
        self, definition: WorkflowDefinition, trace: Sequence[AttemptRecord]
    ) -> str:
        """Re-run the transition rules over a recorded trace; pure.

        Returns the terminal (or latest) state description, which must
        match the original instance's for a faithful recording.
        """
        inst = WorkflowInstance(instance_id="replay", definition=definition.name)
        for rec in trace:
            if inst.terminal:
                raise InstanceTerminal("trace continues past a terminal state")
            stage = definition.stages[inst.current_stage]
            if stage.name != rec.stage:
                raise ValueError(
                    f"trace stage {rec.stage!r} does not match expected {stage.name!r}"
                )
            inst.state = InstanceState.RUNNING
            inst._stage_name = stage.name
            inst.stage_attempts[stage.name] = rec.attempt
            self._transition(inst, definition, stage, rec.attempt, rec.ok, rec.error)
        return inst.describe_state()

    # -- metrics ----------------------------------------------------------------

    def metrics(self, name: str) -> dict:
        """Aggregate stage counts, success rate, and duration quantiles
        over every instance of a definition. Unknown names yield empty
        aggregates rather than errors."""
        with self._lock:
            instances = [i for i in self._instances.values() if i.definition == name]
            definition = self._definitions.get(name)
        stage_names = [s.name for s in definition.stages] if definition else []
        stages: Dict[str, dict] = {}
        for sname in stage_names:
            attempts = [r for i in instances for r in i.trace if r.stage == sname]
            durations = sorted(r.duration_ms for r in attempts)
            stages[sname] = {
                "attempts": len(attempts),
                "successes": sum(1 for r in attempts if r.ok),
                "failures": sum(1 for r in attempts if not r.ok),
                "duration_ms": _quantiles(durations),
            }
        terminal = [i for i in instances if i.terminal]
        completed = sum(1 for i in terminal if i.state is InstanceState.COMPLETED)
        return {
            "workflow": name,
            "instances": len(instances),
            "completed": completed,
            "failed": len(terminal) - completed,
            "success_rate": (completed / len(terminal)) if terminal else 0.0,
            "stages": stages,
        }


def _quantiles(durations: List[float]) -> Optional[dict]:
    if not durations:
        return None
    if len(durations) == 1:
        p50 = p95 = p99 = durations[0]
    else:
        cuts = statistics.quantiles(durations, n=100, method="inclusive")
        p50, p95, p99 = cuts[49], cuts[94], cuts[98]
    return {"p50": round(p50, 3), "p95": round(p95, 3), "p99": round(p99, 3)}
