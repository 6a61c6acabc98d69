/** Training panel state machine: submit, poll, display, one job at a time.
 *
 * The panel disables itself while a job is queued or running (the server
 * enforces the same rule with 409) and surfaces the final metrics exactly
 * as the job endpoint reports them.
 */

import { ApiClient, ApiError } from "./api.js";
import type { TrainJob } from "./types.js";

export interface TrainFormConfig {
  hidden: number;
  lr: number;
  schedule: "exponential" | "halve";
  seed?: number;
}

export interface PanelView {
  busy: boolean;
  status: string;
  job: TrainJob | null;
  message: string | null;
}

export type Sleep = (ms: number) => Promise<void>;

const defaultSleep: Sleep = (ms) => new Promise((resolve) => setTimeout(resolve, ms));

export class TrainingPanel {
  private job: TrainJob | null = null;
  private busy = false;
  private message: string | null = null;

  constructor(
    private readonly api: ApiClient,
    private readonly onChange: (view: PanelView) => void,
    private readonly sleep: Sleep = defaultSleep,
    private readonly pollMs = 250,
  ) {}

  view(): PanelView {
    return {
      busy: this.busy,
      status: this.job?.state ?? "idle",
      job: this.job,
      message: this.message,
    };
  }

  private emit(): void {
    this.onChange(this.view());
  }

  /** Submit and poll to completion. Resolves with the finished job. */
  async submit(config: TrainFormConfig): Promise<TrainJob | null> {
    if (this.busy) {
      this.message = "a training job is already running";
      this.emit();
      return null;
    }
    this.busy = true;
    this.message = null;
    this.emit();
    let jobId: string;
    try {
      ({ job_id: jobId } = await this.api.submitTrain({ ...config }));
    } catch (error) {
      this.busy = false;
      this.message =
        error instanceof ApiError && error.status === 409
          ? "a training job is already running"
          : String(error);
      this.emit();
      return null;
    }
    try {
      for (;;) {
        this.job = await this.api.getJob(jobId);
        this.emit();
        if (this.job.state === "done" || this.job.state === "failed") break;
        await this.sleep(this.pollMs);
      }
    } finally {
      this.busy = false;
    }
    if (this.job?.state === "failed") {
      this.message = this.job.error ?? "training failed";
    }
    this.emit();
    return this.job;
  }
}
