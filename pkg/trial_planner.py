"""Plan sweep trials and detect which of them a store already holds."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from run_store import RunStore
from stability import RunRecord, SweepSpec, sample_lr_wd, trial_id


@dataclass(frozen=True)
class TrialSpec:
    """One planned training trial."""

    model_name: str
    optimizer: str
    lr: float
    wd: float
    epochs: float
    seed: int
    config_key: str = ""

    @property
    def trial_id(self) -> str:
        return trial_id(self.model_name, self.optimizer, self.lr, self.wd, self.epochs, self.seed, self.config_key)


class TrialPlanner:
    """Detect differences between planned sweep trials and the run store."""

    def __init__(self, store: RunStore) -> None:
        """
        Initialize the TrialPlanner.

        Args:
            store: The store completed trials are recorded in.

        """
        self.store = store
        self.logger = logging.getLogger("TrialPlanner")

    def plan(
        self,
        model_name: str,
        optimizer: str,
        epochs: float,
        seed: int,
        spec: SweepSpec,
        config_key: str = "",
    ) -> list[TrialSpec]:
        """One trial per sampled (lr, wd) pair."""
        return [
            TrialSpec(model_name, optimizer, lr, wd, epochs, seed, config_key)
            for lr, wd in sample_lr_wd(spec)
        ]

    def compare_trials(
        self,
        planned: list[TrialSpec],
        stored: list[RunRecord],
    ) -> dict[str, list]:
        """
        Compare planned trials with stored records.

        Args:
            planned: Trials the sweep wants.
            stored: Records already in the store.

        Returns:
            A dictionary with planned trials still to run ("new"), planned trials
            already stored ("completed") and stored records the plan does not
            contain ("orphaned").

        """
        planned_map = {t.trial_id: t for t in planned}
        stored_map = {r.trial_id: r for r in stored}

        new_trials = [t for key, t in planned_map.items() if key not in stored_map]
        completed = [stored_map[key] for key in planned_map if key in stored_map]
        orphaned = [r for key, r in stored_map.items() if key not in planned_map]

        self.logger.info(
            "Planned %d trials: %d new, %d completed, %d orphaned",
            len(planned_map),
            len(new_trials),
            len(completed),
            len(orphaned),
        )
        return {"new": new_trials, "completed": completed, "orphaned": orphaned}


    def pending(self, planned: list[TrialSpec]) -> list[TrialSpec]:
        """Planned trials the store does not hold yet."""
        return self.compare_trials(planned, self.store.get_all_records())["new"]
