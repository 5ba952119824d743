/** Typed client for the annotation rating service. */

export interface AnnotationItem {
  image_id: string;
  prompt_text: string;
  category: string;
  claimed_feasibility: string;
}

export interface NextItemResponse {
  rated: number;
  total: number;
  done: boolean;
  item?: AnnotationItem;
}

export interface RatingSubmission {
  annotator_id: string;
  image_id: string;
  feasibility_correct: boolean;
  naturalness: number;
}

export interface StoredResponse {
  stored: string;
  rated: number;
  total: number;
}

export interface HealthResponse {
  ok: boolean;
  items: number;
}

/** A response the server produced on purpose (4xx/5xx with a JSON error). */
export class ServerRejection extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ServerRejection";
  }
}

async function rejectionFrom(response: Response): Promise<ServerRejection> {
  let message = `request failed with status ${response.status}`;
  try {
    const body = (await response.json()) as { error?: string };
    if (body && typeof body.error === "string") message = body.error;
  } catch {
    // non-JSON error body; keep the status message
  }
  return new ServerRejection(response.status, message);
}

export class AnnotationApi {
  private readonly base: string;
  private readonly fetchFn: typeof fetch;

  constructor(baseUrl: string, fetchFn: typeof fetch = fetch) {
    this.base = baseUrl.replace(/\/+$/, "");
    this.fetchFn = fetchFn;
  }

  private async json<T>(response: Response): Promise<T> {
    if (!response.ok) throw await rejectionFrom(response);
    return (await response.json()) as T;
  }

  /** Next unrated item for this annotator, or a done marker. */
  async nextItem(annotator: string): Promise<NextItemResponse> {
    const url = `${this.base}/items/next?annotator=${encodeURIComponent(annotator)}`;
    return this.json<NextItemResponse>(await this.fetchFn(url));
  }

  /** Store one rating; the server overwrites any earlier rating for the pair. */
  async submitRating(rating: RatingSubmission): Promise<StoredResponse> {
    const response = await this.fetchFn(`${this.base}/ratings`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(rating),
    });
    return this.json<StoredResponse>(response);
  }

  /** Images are addressed by id through the service, never by file path. */
  imageUrl(imageId: string): string {
    return `${this.base}/images/${encodeURIComponent(imageId)}`;
  }

  async health(): Promise<HealthResponse> {
    return this.json<HealthResponse>(await this.fetchFn(`${this.base}/health`));
  }
}
