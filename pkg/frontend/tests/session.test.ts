import { describe, expect, it } from "vitest";

import { AnnotationApi } from "../src/api.js";
import { AnnotationFlow } from "../src/session.js";
import { MockServer, threeItems } from "./mock_server.js";

function makeFlow(server: MockServer, annotator = "rater") {
  const api = new AnnotationApi("http://service.test", server.fetchFn);
  return new AnnotationFlow(api, annotator);
}

async function rateCurrent(flow: AnnotationFlow, naturalness = 4): Promise<void> {
  flow.setFeasibility(true);
  flow.setNaturalness(naturalness);
  await flow.submit();
}

describe("sequential session flow", () => {
  it("walks a 3-item session: 3 displays, 3 posts, then the done screen", async () => {
    const server = new MockServer(threeItems());
    const flow = makeFlow(server);
    const displayed: string[] = [];
    let lastSeen = "";
    flow.onChange(() => {
      if (flow.phase === "rating" && flow.item && flow.item.image_id !== lastSeen) {
        lastSeen = flow.item.image_id;
        displayed.push(flow.item.image_id);
      }
    });

    await flow.start();
    expect(flow.phase).toBe("rating");
    while (flow.phase === "rating") {
      await rateCurrent(flow);
    }

    expect(displayed).toEqual(["img-00", "img-01", "img-02"]);
    expect(server.storedPosts.map((post) => post.image_id)).toEqual([
      "img-00",
      "img-01",
      "img-02",
    ]);
    expect(flow.phase).toBe("done");
    expect(flow.progress).toEqual({ rated: 3, total: 3 });
  });

  it("submits exactly one body per advance, carrying the drafted values", async () => {
    const server = new MockServer(threeItems());
    const flow = makeFlow(server, "alice");
    await flow.start();
    flow.setFeasibility(false);
    flow.setNaturalness(2);
    await flow.submit();
    expect(server.storedPosts).toEqual([
      {
        annotator_id: "alice",
        image_id: "img-00",
        feasibility_correct: false,
        naturalness: 2,
      },
    ]);
    expect(flow.item?.image_id).toBe("img-01");
  });

  it("requires a non-empty annotator token", () => {
    const server = new MockServer(threeItems());
    expect(() => makeFlow(server, "   ")).toThrow(/non-empty/);
  });
});

describe("client-side validation", () => {
  it("blocks submit until both fields are set", async () => {
    const server = new MockServer(threeItems());
    const flow = makeFlow(server);
    await flow.start();

    expect(flow.canSubmit()).toBe(false);
    await flow.submit();
    expect(server.arrivedPosts).toBe(0);

    flow.setFeasibility(true);
    expect(flow.canSubmit()).toBe(false);
    await flow.submit();
    expect(server.arrivedPosts).toBe(0);

    flow.setNaturalness(5);
    expect(flow.canSubmit()).toBe(true);
  });

  it("ignores out-of-scale naturalness values", async () => {
    const server = new MockServer(threeItems());
    const flow = makeFlow(server);
    await flow.start();
    flow.setNaturalness(0);
    flow.setNaturalness(6);
    flow.setNaturalness(3.5);
    expect(flow.draft.naturalness).toBeNull();
    flow.setNaturalness(3);
    expect(flow.draft.naturalness).toBe(3);
  });

  it("ignores field edits outside the rating phase", () => {
    const server = new MockServer(threeItems());
    const flow = makeFlow(server);
    flow.setFeasibility(true);
    flow.setNaturalness(4);
    expect(flow.draft).toEqual({ feasibilityCorrect: null, naturalness: null });
  });
});

describe("server rejection", () => {
  it("re-enables the form with an inline message and does not advance", async () => {
    const server = new MockServer(threeItems());
    server.rejectPosts(422, "naturalness must be an integer in [1, 5]");
    const flow = makeFlow(server);
    await flow.start();
    flow.setFeasibility(true);
    flow.setNaturalness(4);
    await flow.submit();

    expect(flow.phase).toBe("rating");
    expect(flow.item?.image_id).toBe("img-00");
    expect(flow.inlineError).toMatch(/naturalness/);
    expect(flow.draft).toEqual({ feasibilityCorrect: true, naturalness: 4 });
    expect(server.storedPosts).toHaveLength(0);

    await flow.submit();
    expect(flow.inlineError).toBeNull();
    expect(flow.item?.image_id).toBe("img-01");
    expect(server.storedPosts).toHaveLength(1);
  });
});

describe("idempotent submit guard", () => {
  it("never stores two ratings for one advance, even with rapid submits", async () => {
    const server = new MockServer(threeItems());
    const flow = makeFlow(server);
    await flow.start();
    flow.setFeasibility(true);
    flow.setNaturalness(4);

    const release = server.holdRequests();
    const first = flow.submit();
    const second = flow.submit();
    const third = flow.submit();
    release();
    await Promise.all([first, second, third]);

    expect(server.arrivedPosts).toBe(1);
    expect(server.storedPosts).toHaveLength(1);
    expect(flow.item?.image_id).toBe("img-01");
  });
});

describe("network failure", () => {
  it("raises a retry banner on a failed load and recovers", async () => {
    const server = new MockServer(threeItems());
    server.failConnections(1);
    const flow = makeFlow(server);
    await flow.start();

    expect(flow.needsRetry).toBe(true);
    expect(flow.connectionError).toMatch(/fetch failed/);
    expect(flow.phase).toBe("loading");

    await flow.retry();
    expect(flow.needsRetry).toBe(false);
    expect(flow.phase).toBe("rating");
    expect(flow.item?.image_id).toBe("img-00");
  });

  it("keeps the collected rating through a failed submit and retries it", async () => {
    const server = new MockServer(threeItems());
    const flow = makeFlow(server);
    await flow.start();
    flow.setFeasibility(false);
    flow.setNaturalness(1);

    server.failConnections(1);
    await flow.submit();
    expect(flow.needsRetry).toBe(true);
    expect(flow.draft).toEqual({ feasibilityCorrect: false, naturalness: 1 });
    expect(server.storedPosts).toHaveLength(0);

    await flow.retry();
    expect(server.storedPosts).toEqual([
      {
        annotator_id: "rater",
        image_id: "img-00",
        feasibility_correct: false,
        naturalness: 1,
      },
    ]);
    expect(flow.needsRetry).toBe(false);
    expect(flow.item?.image_id).toBe("img-01");
  });

  it("clears a stale retry when the user resubmits manually", async () => {
    const server = new MockServer(threeItems());
    const flow = makeFlow(server);
    await flow.start();
    flow.setFeasibility(true);
    flow.setNaturalness(3);

    server.failConnections(1);
    await flow.submit();
    expect(flow.needsRetry).toBe(true);

    await flow.submit(); // manual retry instead of the banner button
    expect(flow.needsRetry).toBe(false);
    expect(server.storedPosts).toHaveLength(1);
    expect(flow.item?.image_id).toBe("img-01");

    await flow.retry(); // must be a no-op, not a duplicate post
    expect(server.arrivedPosts).toBe(1);
    expect(server.storedPosts).toHaveLength(1);
  });
});

describe("progress against the server", () => {
  it("matches the server-side rated count after a reload", async () => {
    const server = new MockServer(threeItems());
    const first = makeFlow(server, "bob");
    await first.start();
    await rateCurrent(first);
    await rateCurrent(first);
    expect(server.ratedCount("bob")).toBe(2);

    const reloaded = makeFlow(server, "bob");
    await reloaded.start();
    expect(reloaded.progress).toEqual({ rated: 2, total: 3 });
    expect(reloaded.item?.image_id).toBe("img-02");
  });

  it("keeps annotators independent", async () => {
    const server = new MockServer(threeItems());
    const alice = makeFlow(server, "alice");
    await alice.start();
    await rateCurrent(alice);

    const bob = makeFlow(server, "bob");
    await bob.start();
    expect(bob.progress).toEqual({ rated: 0, total: 3 });
    expect(bob.item?.image_id).toBe("img-00");
  });
});
