/** Typed client over the annotation service HTTP contract.
 *
 * All writes the UI ever performs go through `relabel` and `submitTrain`;
 * everything else is a GET. The fetch implementation is injectable so
 * tests can run against an in-process fake.
 */

import type {
  Bbox,
  CellCollection,
  RelabelResponse,
  SlidesResponse,
  TrainJob,
} from "./types.js";

export type FetchFn = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(readonly status: number, readonly detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function errorDetail(response: Response): Promise<string> {
  try {
    const body = await response.json();
    return typeof body.detail === "string" ? body.detail : JSON.stringify(body);
  } catch {
    return response.statusText;
  }
}

export class ApiClient {
  constructor(
    readonly baseUrl: string = "",
    private readonly fetchFn: FetchFn = (url, init) => fetch(url, init),
  ) {}

  private async get<T>(path: string): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path);
    if (!response.ok) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    return (await response.json()) as T;
  }

  private async post<T>(path: string, body: unknown): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!response.ok) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    return (await response.json()) as T;
  }

  getSlides(): Promise<SlidesResponse> {
    return this.get("/slides");
  }

  getCells(
    slideId: string,
    bbox: Bbox,
    options: { minProb?: number; maxFeatures?: number } = {},
  ): Promise<CellCollection> {
    const params = new URLSearchParams({
      bbox: `${bbox.r0},${bbox.c0},${bbox.r1},${bbox.c1}`,
    });
    if (options.minProb !== undefined) params.set("min_prob", String(options.minProb));
    if (options.maxFeatures !== undefined) {
      params.set("max_features", String(options.maxFeatures));
    }
    return this.get(`/slides/${slideId}/cells?${params.toString()}`);
  }

  relabel(slideId: string, cellId: string, newLabel: number, actor: string) {
    return this.post<RelabelResponse>(
      `/slides/${slideId}/cells/${encodeURIComponent(cellId)}/label`,
      { new_label: newLabel, actor },
    );
  }

  submitTrain(config: Record<string, unknown>): Promise<{ job_id: string }> {
    return this.post("/train", config);
  }

  getJob(jobId: string): Promise<TrainJob> {
    return this.get(`/train/${jobId}`);
  }

  tileUrl(slideId: string, level: number, x: number, y: number): string {
    return `${this.baseUrl}/slides/${slideId}/tiles/${level}/${x}/${y}`;
  }
}
