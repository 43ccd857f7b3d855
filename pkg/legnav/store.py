"""
Home to the RunStore: a SQLAlchemy backed store for run artifacts and metrics.
"""
import contextlib
import hashlib
import logging
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Union

import backoff
from sqlalchemy import create_engine
from sqlalchemy.exc import IntegrityError
from sqlalchemy.orm import Session, scoped_session, sessionmaker

from legnav.models import (
    METRIC_COLUMNS,
    TAG_MAX_LENGTH,
    Artifact,
    Base,
    MetricRow,
    ValueMixIn,
)
from legnav.values import ENOVAL

log = logging.getLogger(__name__)


retry_integrity_errors = backoff.on_exception(
    backoff.constant, IntegrityError, interval=0.1, max_time=30
)

DEFAULT_TAG = "__default__"
TERRAIN_TAG = "terrain"
TRAJECTORY_TAG = "trajectory"


def default_url(out_dir) -> str:
    """
    Returns the sqlite url of the store kept inside a run directory.
    """
    return f"sqlite:///{out_dir}/run.db"


class RunStore:
    """
    Client for working with the run store.
    """

    def __init__(self, url: str, create_models: bool = True) -> None:
        """
        Initializes the RunStore client.

        Takes in the sqlalchemy url to connect to the database, along
        with an option to ensure the necessary db models are created.
        """
        self.url = url
        self._engine = create_engine(url, pool_pre_ping=True)

        if create_models:
            Base.metadata.create_all(self._engine)

        self._session_factory = sessionmaker(bind=self._engine)
        self._session = scoped_session(self._session_factory)

    def __iter__(self) -> Iterable[Artifact]:
        """
        Returns an iterable of all artifacts in the store.
        """
        with self.session(commit=False) as session:
            query = session.query(Artifact).order_by(
                Artifact.key.asc(), Artifact.tag.asc()
            )
            for artifact in query.all():
                yield artifact

    def __len__(self) -> int:
        """
        Returns the number of artifacts in the store.
        """
        with self.session(commit=False) as session:
            return session.query(Artifact).count()

    @contextlib.contextmanager
    def session(self, commit: bool = True) -> Iterable[Session]:
        """
        Contextmanager to obtain a temp session with the underlying database.

        If commit is True, the session will be committed after the block.
        """
        with self._session() as session:
            yield session

            if commit:
                session.commit()

    def close(self) -> None:
        self._session.remove()
        self._engine.dispose()

    @retry_integrity_errors
    def get(self, key: str, default: Any = ENOVAL, tag: str = DEFAULT_TAG) -> Any:
        """
        Retrieves the value for the given key and tag.

        If the key/tag combo is not found and a default is provided, the
        default value is returned. If no default is provided, a KeyError is raised.
        """
        with self.session() as session:
            result = session.query(Artifact).filter_by(key=key, tag=tag).one_or_none()

            if result is None:
                result = ValueMixIn(default)

            if result.value is ENOVAL:
                raise KeyError(f"key: {key}, tag: {tag}")

            return result.value

    @retry_integrity_errors
    def set(self, key: str, value: Any, tag: str = DEFAULT_TAG) -> None:
        """
        Sets the given key/tag combo to the value provided.
        """
        with self.session() as session:
            session.merge(Artifact(key=key, value=value, tag=tag))

    @retry_integrity_errors
    def delete(self, key: str, tag: str = DEFAULT_TAG) -> None:
        """
        Deletes the given key/tag combo from the store.
        """
        with self.session() as session:
            result = session.query(Artifact).filter_by(key=key, tag=tag).one_or_none()

            if result is not None:
                session.delete(result)

    @retry_integrity_errors
    def keys(self, tag: str = DEFAULT_TAG) -> List[str]:
        """
        Returns the sorted keys stored under a tag.
        """
        with self.session(commit=False) as session:
            query = (
                session.query(Artifact.key)
                .filter(Artifact.tag == tag)
                .order_by(Artifact.key.asc())
            )
            return [row[0] for row in query.all()]

    @retry_integrity_errors
    def clear(self) -> None:
        """
        Clears all artifacts and metrics from the store.
        """
        with self.session() as session:
            session.query(Artifact).delete()
            session.query(MetricRow).delete()

    @retry_integrity_errors
    def delete_tag(self, tag: str = DEFAULT_TAG) -> int:
        """
        Deletes all keys under a given tag. Defaults to the default tag.

        Returns the number of keys deleted.
        """
        with self.session() as session:
            return session.query(Artifact).filter(Artifact.tag == tag).delete()

    @retry_integrity_errors
    def add_metrics(self, run: str, iteration: int, row: Mapping[str, Any]) -> None:
        """
        Stores (or replaces) the metrics of one training iteration.
        """
        values = {name: row[name] for name in METRIC_COLUMNS}
        values["bias_gate"] = bool(values["bias_gate"])
        with self.session() as session:
            session.merge(MetricRow(run=run, iteration=iteration, **values))

    @retry_integrity_errors
    def metrics(self, run: str) -> List[Dict[str, Any]]:
        """
        Returns the metric rows of a run ordered by iteration.
        """
        with self.session(commit=False) as session:
            query = (
                session.query(MetricRow)
                .filter(MetricRow.run == run)
                .order_by(MetricRow.iteration.asc())
            )
            return [m.to_dict() for m in query.all()]

    def memoize(
        self,
        tag: Optional[str] = None,
        skip_saving_to_cache_if: Union[bool, Callable] = False,
    ):
        """
        A decorator to memoize the results of a function into the store.

        Keys are a digest of the call's argument reprs, so arguments must have
        deterministic reprs (dataclasses, numbers, strings).

        skip_saving_to_cache_if allows a bool or callable, if callable it will be called with a single param of the value about to be returned
            (and should return a bool). If it is True, we will not save this value as memoized.
        """
        if callable(tag):
            # we've been called like:
            # @memoize
            # without () at the end
            func = tag
            tag = None
        else:
            func = None

        def inner(func):
            # Warning: we're truncating to fit the tag
            func_tag = (tag or f"memoize.{func.__module__}_{func.__qualname__}")[
                :TAG_MAX_LENGTH
            ]

            def wrapper(*args, **kwargs):
                key = hashlib.sha256(f"{args!r}_{kwargs!r}".encode()).hexdigest()

                NO_RESULT = object()
                result = self.get(key, NO_RESULT, tag=func_tag)

                if result is NO_RESULT:
                    result = func(*args, **kwargs)

                    skip_saving_to_cache = False
                    if callable(skip_saving_to_cache_if):
                        skip_saving_to_cache = bool(skip_saving_to_cache_if(result))
                    elif skip_saving_to_cache_if:
                        skip_saving_to_cache = True

                    if skip_saving_to_cache:
                        log.debug(
                            f"skip_saving_to_cache_if is forcing us to not save to cache the value for key: {key}"
                        )
                    else:
                        self.set(key, result, tag=func_tag)
                else:
                    log.debug(f"cache hit for {func_tag}: {key}")

                return result

            wrapper.cache_clear = lambda: self.delete_tag(func_tag)
            wrapper.__wrapped__ = func
            return wrapper

        if func:
            return inner(func)
        else:
            return inner
