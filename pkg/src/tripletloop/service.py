"""Review-loop backbone: failure queue, relabel events, serialized retrain jobs.

State is event-sourced: every relabel and job transition is appended to a
JSON-lines log, and replaying the log reconstructs the queue state exactly.
Retraining runs on a single worker thread, so at most one job is ever
running.
"""

from __future__ import annotations

import io
import json
import queue
import threading
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as D
from .evaluation import ConfusionPartition, MetricsReport, build_report, read_inference_log
from .models import checkpoint_fingerprint, load_checkpoint, save_checkpoint
from .pipeline import repair
from .training import TrainConfig, train_fingerprint
from .triplets import TripletDatasetConfig

VERDICTS = ("confirm-FP", "confirm-FN", "baseline-correct")
JOB_CONFIG_KEYS = {
    "epochs", "learning_rate", "weight_decay", "margin", "loss_kind",
    "batch_size", "seed", "backbone_trainable", "n_train", "support_size", "head_seed",
}


class ServiceError(Exception):
    """Base class carrying an error code for the HTTP layer."""

    code = "service_error"
    status = 400


class UnknownResourceError(ServiceError):
    code = "not_found"
    status = 404


class InvalidRequestError(ServiceError):
    code = "invalid_request"
    status = 400


class DuplicateJobError(ServiceError):
    code = "duplicate_job"
    status = 409


def _utcnow() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


class EventLog:
    """Append-only JSON-lines log with monotonically increasing sequence ids."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._seq = 0
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    self._seq = max(self._seq, json.loads(line)["seq"])
        self._fh = self.path.open("a")
        self._lock = threading.Lock()

    def append(self, event: dict) -> dict:
        with self._lock:
            self._seq += 1
            event = {"seq": self._seq, **event}
            self._fh.write(json.dumps(event, sort_keys=True) + "\n")
            self._fh.flush()
        return event

    def close(self) -> None:
        self._fh.close()

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        out = []
        path = Path(path)
        if not path.exists():
            return out
        for line in path.read_text().splitlines():
            if line.strip():
                out.append(json.loads(line))
        return sorted(out, key=lambda e: e["seq"])


def _relabel_key(image_id: str, pathology: str) -> str:
    return f"{image_id}|{pathology}"


class _StateMachine:
    """Pure event-fold over relabels, jobs and report history.

    Shared by the live service and offline replay so both derive byte-equal
    state from the same log.
    """

    def __init__(self) -> None:
        self.relabel_events: dict[str, dict] = {}
        self.effective: dict[str, dict] = {}
        self.jobs: dict[str, dict] = {}
        self.reports: list[dict] = []

    def apply(self, event: dict) -> None:
        kind = event["type"]
        if kind == "relabel":
            body = event["event"]
            self.relabel_events[body["event_id"]] = body
            key = _relabel_key(body["image_id"], body["pathology"])
            current = self.effective.get(key)
            stamp = (body["timestamp"], body["event_id"])
            if current is None or stamp >= (current["timestamp"], current["event_id"]):
                self.effective[key] = body
        elif kind == "job_queued":
            job = dict(event["job"])
            job["status"] = "queued"
            self.jobs[job["job_id"]] = job
        elif kind == "job_started":
            job = self.jobs[event["job_id"]]
            job["status"] = "running"
            job["started_at"] = event["started_at"]
        elif kind == "job_finished":
            job = self.jobs[event["job_id"]]
            job["status"] = event["status"]
            job["finished_at"] = event["finished_at"]
            if event["status"] == "done":
                job["result"] = event["result"]
                self.reports.append({
                    "job_id": event["job_id"],
                    "report_path": event["result"]["report_path"],
                    "comparison_path": event["result"]["comparison_path"],
                    "finished_at": event["finished_at"],
                })
            else:
                job["error"] = event.get("error", "unknown failure")
        else:
            raise ValueError(f"unknown event type {kind!r}")

    def snapshot(self) -> dict:
        return {
            "relabels": {k: dict(v) for k, v in sorted(self.effective.items())},
            "jobs": {k: dict(v) for k, v in sorted(self.jobs.items())},
            "reports": [dict(r) for r in self.reports],
        }


@dataclass
class ServiceContext:
    """Baseline artifacts the service operates on."""

    records: list
    partition: ConfusionPartition
    report: MetricsReport
    classifier: object
    threshold: float
    split_id: str
    probabilities: dict[tuple[str, str], float]
    decisions: dict[tuple[str, str], str]
    preprocess: dict | None = None


class LoopService:
    def __init__(self, context: ServiceContext, state_dir: str | Path,
                 job_runner=None, replay: bool = True):
        self.ctx = context
        self.by_id = {r.image_id: r for r in context.records}
        self.state_dir = Path(state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._state = _StateMachine()
        self._runner = job_runner or _default_job_runner
        log_path = self.state_dir / "events.jsonl"
        if replay:
            for event in EventLog.read(log_path):
                self._state.apply(event)
        self.log = EventLog(log_path)
        self._queue: queue.Queue = queue.Queue()
        self._worker = threading.Thread(target=self._work, daemon=True)
        self._worker.start()

    # -- construction ------------------------------------------------------

    @classmethod
    def from_workdir(cls, workdir: str | Path, job_runner=None) -> "LoopService":
        workdir = Path(workdir)
        base_dir = Path((workdir / ".latest" / "baseline").read_text().strip())
        meta = json.loads((base_dir / "baseline.json").read_text())
        split = json.loads((base_dir / "split.json").read_text())
        partition = ConfusionPartition.from_dict(
            json.loads((base_dir / "partition.json").read_text())
        )
        report = MetricsReport.load(base_dir / "report.json")
        classifier, _ = load_checkpoint(base_dir / "classifier.ckpt")
        records, _ = D.load_dataset_dir(meta["dataset_dir"])
        eval_ids = set(split["eval_ids"])
        eval_records = [r for r in records if r.image_id in eval_ids]
        inference = read_inference_log(base_dir / "inference.jsonl")
        context = ServiceContext(
            records=eval_records,
            partition=partition,
            report=report,
            classifier=classifier,
            threshold=meta["threshold"],
            split_id=meta["split_id"],
            preprocess=meta.get("preprocess"),
            probabilities={(r.image_id, r.pathology): r.probability for r in inference},
            decisions={(r.image_id, r.pathology): r.decision for r in inference},
        )
        return cls(context, workdir / "service", job_runner=job_runner)

    # -- relabels ----------------------------------------------------------

    def effective_partition(self) -> ConfusionPartition:
        """Baseline partition with reviewer verdicts applied.

        ``baseline-correct`` flips the effective truth to match the baseline
        decision, moving FP -> TP and FN -> TN; confirm verdicts keep cells.
        """
        with self._lock:
            verdicts = dict(self._state.effective)
        part = self.ctx.partition.copy()
        for key, body in verdicts.items():
            if body["verdict"] != "baseline-correct":
                continue
            image_id, pathology = key.split("|", 1)
            cell = self.ctx.partition.cell_of(pathology, image_id)
            if cell == "FP":
                part.move(pathology, image_id, "TP")
            elif cell == "FN":
                part.move(pathology, image_id, "TN")
        return part

    def list_failures(self, pathology: str, page: int = 1, page_size: int = 20) -> dict:
        if pathology not in self.ctx.partition.cells:
            raise UnknownResourceError(f"unknown pathology {pathology!r}")
        if page < 1 or page_size < 1:
            raise InvalidRequestError("page and page_size must be >= 1")
        part = self.effective_partition()
        failed = part.failed(pathology)
        start = (page - 1) * page_size
        items = []
        with self._lock:
            for image_id in failed[start : start + page_size]:
                body = self._state.effective.get(_relabel_key(image_id, pathology))
                truth = "positive" if self.by_id[image_id].labels[D.pathology_index(pathology)] else "negative"
                items.append({
                    "image_id": image_id,
                    "pathology": pathology,
                    "probability": self.ctx.probabilities[(image_id, pathology)],
                    "decision": self.ctx.decisions[(image_id, pathology)],
                    "truth": truth,
                    "cell": part.cell_of(pathology, image_id),
                    "verdict": body["verdict"] if body else None,
                    "image_url": f"/images/{image_id}",
                })
        return {
            "pathology": pathology,
            "page": page,
            "page_size": page_size,
            "total": len(failed),
            "items": items,
        }

    def submit_relabel(self, image_id: str, pathology: str, verdict: str,
                       reviewer_id: str = "reviewer", event_id: str | None = None,
                       timestamp: str | None = None) -> str:
        if pathology not in self.ctx.partition.cells:
            raise UnknownResourceError(f"unknown pathology {pathology!r}")
        if image_id not in self.by_id:
            raise UnknownResourceError(f"unknown image {image_id!r}")
        if verdict not in VERDICTS:
            raise InvalidRequestError(f"verdict must be one of {VERDICTS}, got {verdict!r}")
        baseline_cell = self.ctx.partition.cell_of(pathology, image_id)
        if baseline_cell not in ("FP", "FN"):
            raise InvalidRequestError(
                f"{image_id} is not a failed inference for {pathology} (cell {baseline_cell})"
            )
        if verdict == "confirm-FP" and baseline_cell != "FP":
            raise InvalidRequestError(f"cannot confirm-FP a baseline {baseline_cell}")
        if verdict == "confirm-FN" and baseline_cell != "FN":
            raise InvalidRequestError(f"cannot confirm-FN a baseline {baseline_cell}")
        with self._lock:
            if event_id is not None and event_id in self._state.relabel_events:
                return event_id  # idempotent resubmission
            body = {
                "event_id": event_id or uuid.uuid4().hex,
                "image_id": image_id,
                "pathology": pathology,
                "verdict": verdict,
                "reviewer_id": reviewer_id,
                "timestamp": timestamp or _utcnow(),
            }
            event = self.log.append({"type": "relabel", "event": body})
            self._state.apply(event)
            return body["event_id"]

    # -- jobs ----------------------------------------------------------------

    def _parse_job_config(self, overrides: dict | None) -> tuple[TrainConfig, TripletDatasetConfig, int, int]:
        overrides = dict(overrides or {})
        unknown = set(overrides) - JOB_CONFIG_KEYS
        if unknown:
            raise InvalidRequestError(f"unknown config keys: {sorted(unknown)}")
        n_train = overrides.pop("n_train", 150)
        support_size = overrides.pop("support_size", 20)
        head_seed = overrides.pop("head_seed", 0)
        try:
            train_cfg = TrainConfig(**overrides)
            triplet_cfg = TripletDatasetConfig(n_train=n_train, seed=train_cfg.seed)
        except (TypeError, ValueError) as exc:
            raise InvalidRequestError(f"invalid config: {exc}") from exc
        return train_cfg, triplet_cfg, support_size, head_seed

    def enqueue_retrain(self, target: str, config: dict | None = None) -> str:
        if target != "all" and target not in self.ctx.partition.cells:
            raise UnknownResourceError(f"unknown pathology {target!r}")
        self._parse_job_config(config)  # validate before queueing
        part = self.effective_partition()
        if target == "all":
            if not any(part.failed(p) for p in part.cells):
                raise InvalidRequestError("no failed inferences left to retrain on")
        elif not part.failed(target):
            raise InvalidRequestError(f"no failed inferences left for {target!r}")
        normalized = json.dumps(config or {}, sort_keys=True)
        with self._lock:
            for job in self._state.jobs.values():
                if (job["status"] == "queued" and job["target"] == target
                        and json.dumps(job["config"], sort_keys=True) == normalized):
                    raise DuplicateJobError(f"identical job already queued: {job['job_id']}")
            job_id = f"job-{len(self._state.jobs) + 1:04d}"
            job = {
                "job_id": job_id,
                "target": target,
                "config": config or {},
                "queued_at": _utcnow(),
            }
            event = self.log.append({"type": "job_queued", "job": job})
            self._state.apply(event)
        self._queue.put(job_id)
        return job_id

    def job_status(self, job_id: str) -> dict:
        with self._lock:
            job = self._state.jobs.get(job_id)
            if job is None:
                raise UnknownResourceError(f"unknown job {job_id!r}")
            return dict(job)

    def running_jobs(self) -> list[str]:
        with self._lock:
            return [j["job_id"] for j in self._state.jobs.values() if j["status"] == "running"]

    def _work(self) -> None:
        while True:
            job_id = self._queue.get()
            if job_id is None:
                return
            with self._lock:
                job = dict(self._state.jobs[job_id])
                event = self.log.append({
                    "type": "job_started", "job_id": job_id, "started_at": _utcnow(),
                })
                self._state.apply(event)
            try:
                result = self._runner(self, job)
                finish = {"type": "job_finished", "job_id": job_id, "status": "done",
                          "finished_at": _utcnow(), "result": result}
            except Exception as exc:  # noqa: BLE001 - job failures land in status
                finish = {"type": "job_finished", "job_id": job_id, "status": "failed",
                          "finished_at": _utcnow(), "error": f"{type(exc).__name__}: {exc}"}
            with self._lock:
                event = self.log.append(finish)
                self._state.apply(event)
            self.write_snapshot()

    # -- reports -------------------------------------------------------------

    def latest_report(self) -> dict:
        with self._lock:
            reports = list(self._state.reports)
        if not reports:
            return {"report": self.ctx.report.to_dict(), "comparison": None, "job_id": None}
        last = reports[-1]
        report = json.loads(Path(last["report_path"]).read_text())
        comparison = json.loads(Path(last["comparison_path"]).read_text())
        return {"report": report, "comparison": comparison, "job_id": last["job_id"]}

    # -- infrastructure -------------------------------------------------------

    def snapshot_state(self) -> dict:
        with self._lock:
            return self._state.snapshot()

    def write_snapshot(self) -> None:
        snap = self.snapshot_state()
        (self.state_dir / "snapshot.json").write_text(json.dumps(snap, indent=2, sort_keys=True))

    @staticmethod
    def replay_log(path: str | Path) -> dict:
        state = _StateMachine()
        for event in EventLog.read(path):
            state.apply(event)
        return state.snapshot()

    def image_png(self, image_id: str) -> bytes:
        record = self.by_id.get(image_id)
        if record is None:
            raise UnknownResourceError(f"unknown image {image_id!r}")
        rgb = np.round(np.transpose(record.pixels, (1, 2, 0)) * 255.0).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
        return buf.getvalue()

    def wait_idle(self, timeout: float = 600.0) -> None:
        """Block until every queued job reached a terminal state (tests)."""
        import time

        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                pending = [j for j in self._state.jobs.values()
                           if j["status"] in ("queued", "running")]
            if not pending and self._queue.empty():
                return
            time.sleep(0.02)
        raise TimeoutError("jobs did not finish in time")

    def stop(self) -> None:
        self._queue.put(None)
        self._worker.join(timeout=10)
        self.write_snapshot()
        self.log.close()


def _default_job_runner(service: LoopService, job: dict) -> dict:
    """Triplet build -> train -> reclassify -> compare, artifacts on disk."""
    train_cfg, triplet_cfg, support_size, head_seed = service._parse_job_config(job["config"])
    partition = service.effective_partition()
    before = build_report(partition, {
        "checkpoint_id": checkpoint_fingerprint(service.ctx.classifier),
        "split_id": service.ctx.split_id,
    })
    target = job["target"]
    mode = "incremental" if target == "all" else "tfsl"
    result = repair(
        service.ctx.classifier, partition, service.by_id, target, mode=mode,
        triplet_cfg=triplet_cfg, train_cfg=train_cfg, head_seed=head_seed,
        support_size=support_size, before_report=before,
        skip_unsatisfiable=(target == "all"),
    )
    job_dir = service.state_dir / "jobs" / job["job_id"]
    job_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_ids = {}
    preprocess = (D.PreprocessConfig.from_dict(service.ctx.preprocess)
                  if service.ctx.preprocess else None)
    for key, trained in result.trained.items():
        safe = key.replace(" ", "_")
        checkpoint_ids[key] = save_checkpoint(
            trained.model, job_dir / f"model-{safe}.ckpt", preprocess=preprocess,
            seed=train_cfg.seed, train_fingerprint=train_fingerprint(train_cfg),
        )
    report_path = job_dir / "report_after.json"
    result.after_report.save(report_path)
    comparison_path = job_dir / "comparison.json"
    comparison_path.write_text(json.dumps(result.comparison, indent=2, sort_keys=True))
    return {
        "checkpoint_ids": checkpoint_ids,
        "report_path": str(report_path),
        "comparison_path": str(comparison_path),
        "skipped": result.skipped,
        "epoch_losses": {k: t.loss_trace for k, t in result.trained.items()},
    }


def create_app(service: LoopService, ui_dir: Path | None = None):
    """FastAPI app over a LoopService; all responses JSON, errors {code, message}."""
    from fastapi import FastAPI, Request
    from fastapi.responses import JSONResponse, RedirectResponse, Response

    app = FastAPI(title="tripletloop review service")
    app.state.service = service

    @app.exception_handler(ServiceError)
    async def _service_error(_request: Request, exc: ServiceError):
        return JSONResponse(status_code=exc.status, content={"code": exc.code, "message": str(exc)})

    @app.get("/pathologies")
    def pathologies():
        part = service.effective_partition()
        return {
            "pathologies": [
                {
                    "index": i,
                    "name": name,
                    "failed": len(part.failed(name)) if name in part.cells else 0,
                }
                for i, name in enumerate(D.PATHOLOGIES)
            ]
        }

    @app.get("/failures")
    def failures(pathology: str, page: int = 1, page_size: int = 20):
        return service.list_failures(pathology, page, page_size)

    @app.get("/images/{image_id:path}")
    def image(image_id: str):
        return Response(content=service.image_png(image_id), media_type="image/png")

    @app.post("/relabels")
    def relabels(body: dict):
        for field in ("image_id", "pathology", "verdict"):
            if field not in body:
                raise InvalidRequestError(f"missing field {field!r}")
        event_id = service.submit_relabel(
            body["image_id"], body["pathology"], body["verdict"],
            reviewer_id=body.get("reviewer_id", "reviewer"),
            event_id=body.get("event_id"),
            timestamp=body.get("timestamp"),
        )
        return {"event_id": event_id}

    @app.post("/retrain")
    def retrain(body: dict):
        target = body.get("pathology")
        if not target:
            raise InvalidRequestError("missing field 'pathology' (a name or 'all')")
        job_id = service.enqueue_retrain(target, body.get("config"))
        return {"job_id": job_id}

    @app.get("/jobs/{job_id}")
    def job(job_id: str):
        return service.job_status(job_id)

    @app.get("/reports/latest")
    def latest():
        return service.latest_report()

    if ui_dir is not None and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

        @app.get("/")
        def index():
            return RedirectResponse("/ui/")

    return app
