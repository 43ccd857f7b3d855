"""
Home to models for the legnav run store.
"""
from datetime import datetime, timezone

from sqlalchemy import Column, PrimaryKeyConstraint
from sqlalchemy.dialects.mysql import LONGBLOB
from sqlalchemy.orm import DeclarativeBase, Mapped, mapped_column
from sqlalchemy.types import LargeBinary, PickleType, Unicode

KEY_MAX_LENGTH = 256
TAG_MAX_LENGTH = 256
RUN_MAX_LENGTH = 256

# Per-iteration training metrics persisted next to metrics.csv.
METRIC_COLUMNS = (
    "mean_reward_total",
    "mean_task_sum",
    "success_rate",
    "mean_terrain_level",
    "bias_gate",
    "stall_fraction",
    "value_loss",
    "surrogate_loss",
    "entropy",
    "kl",
    "learning_rate",
    "clip_fraction",
    "steps_per_second",
)


def utc_now() -> datetime:
    """
    Naive UTC now.
    """
    return datetime.now(timezone.utc).replace(tzinfo=None)


class Base(DeclarativeBase):
    """
    The base class for all models.
    """

    pass


class ValueMixIn:
    """
    A mixin used to correspond with an object with a value attribute
    """

    value = Column(
        "value", PickleType(impl=LargeBinary().with_variant(LONGBLOB, "mysql"))
    )

    def __init__(self, value):
        self.value = value


class Artifact(Base, ValueMixIn):
    """
    The table for storing pickled run artifacts: memoized terrain tiles,
    trajectory logs and the like.
    """

    __tablename__ = "artifacts"

    __table_args__ = (PrimaryKeyConstraint("key", "tag", name="artifact_key_tag_unique"),)

    key: Mapped[str] = Column(Unicode(KEY_MAX_LENGTH))
    tag: Mapped[str] = Column(Unicode(TAG_MAX_LENGTH))

    # Naive datetime (though expected to be UTC)
    created: Mapped[datetime] = mapped_column(default=utc_now)


class MetricRow(Base):
    """
    One training iteration of one run.
    """

    __tablename__ = "metrics"

    __table_args__ = (PrimaryKeyConstraint("run", "iteration", name="run_iteration_unique"),)

    run: Mapped[str] = Column(Unicode(RUN_MAX_LENGTH))
    iteration: Mapped[int] = mapped_column()

    mean_reward_total: Mapped[float] = mapped_column()
    mean_task_sum: Mapped[float] = mapped_column()
    success_rate: Mapped[float] = mapped_column()
    mean_terrain_level: Mapped[float] = mapped_column()
    bias_gate: Mapped[bool] = mapped_column()
    stall_fraction: Mapped[float] = mapped_column()
    value_loss: Mapped[float] = mapped_column()
    surrogate_loss: Mapped[float] = mapped_column()
    entropy: Mapped[float] = mapped_column()
    kl: Mapped[float] = mapped_column()
    learning_rate: Mapped[float] = mapped_column()
    clip_fraction: Mapped[float] = mapped_column()
    steps_per_second: Mapped[float] = mapped_column()

    def to_dict(self) -> dict:
        return {
            "run": self.run,
            "iteration": self.iteration,
            **{name: getattr(self, name) for name in METRIC_COLUMNS},
        }
