import { describe, expect, it } from "vitest";

import { ApiError, ServiceClient } from "../src/api.js";

interface Call {
  url: string;
  init?: RequestInit;
}

function stubFetch(payload: unknown, status = 200): { fetchFn: (url: string, init?: RequestInit) => Promise<Response>; calls: Call[] } {
  const calls: Call[] = [];
  const fetchFn = async (url: string, init?: RequestInit) => {
    calls.push({ url, init });
    return new Response(JSON.stringify(payload), {
      status,
      headers: { "Content-Type": "application/json" },
    });
  };
  return { fetchFn, calls };
}

describe("ServiceClient", () => {
  it("lists cases from /cases", async () => {
    const payload = { cases: [{ case_id: "a", image_shape: [4, 4, 4], dose_shape: [4, 4, 4], prescription_dose: 60, has_ground_truth: true, structures: ["ptv"] }] };
    const { fetchFn, calls } = stubFetch(payload);
    const client = new ServiceClient("http://host:1", fetchFn);
    const result = await client.listCases();
    expect(calls).toHaveLength(1);
    expect(calls[0]?.url).toBe("http://host:1/cases");
    expect(calls[0]?.init).toBeUndefined();
    expect(result).toEqual(payload);
  });

  it("creates sessions with a JSON case_id body", async () => {
    const { fetchFn, calls } = stubFetch({ session_id: "s" });
    const client = new ServiceClient("", fetchFn);
    await client.createSession("phantom-00001");
    expect(calls[0]?.url).toBe("/sessions");
    expect(calls[0]?.init?.method).toBe("POST");
    expect(calls[0]?.init?.headers).toEqual({ "Content-Type": "application/json" });
    expect(calls[0]?.init?.body).toBe('{"case_id":"phantom-00001"}');
  });

  it("posts instructions to the session", async () => {
    const { fetchFn, calls } = stubFetch({ session_id: "s" });
    const client = new ServiceClient("", fetchFn);
    await client.instruct("sess-1", "boost_ptv");
    expect(calls[0]?.url).toBe("/sessions/sess-1/instruct");
    expect(calls[0]?.init?.body).toBe('{"text":"boost_ptv"}');
  });

  it("reads curves and history from GET endpoints", async () => {
    const { fetchFn, calls } = stubFetch({ ok: true });
    const client = new ServiceClient("", fetchFn);
    await client.getCdvh("sess-2");
    await client.getHistory("sess-2");
    expect(calls.map((c) => c.url)).toEqual(["/sessions/sess-2/cdvh", "/sessions/sess-2/history"]);
    expect(calls.every((c) => c.init === undefined)).toBe(true);
  });

  it("raises ApiError with the service's error text", async () => {
    const { fetchFn } = stubFetch({ error: "unknown case 'nope'" }, 404);
    const client = new ServiceClient("", fetchFn);
    const failure = await client.createSession("nope").catch((exc: unknown) => exc);
    expect(failure).toBeInstanceOf(ApiError);
    expect((failure as ApiError).status).toBe(404);
    expect((failure as ApiError).message).toBe("unknown case 'nope'");
  });

  it("falls back to a generic message when the error body is not JSON", async () => {
    const fetchFn = async () => new Response("boom", { status: 500 });
    const client = new ServiceClient("", fetchFn);
    const failure = await client.listCases().catch((exc: unknown) => exc);
    expect(failure).toBeInstanceOf(ApiError);
    expect((failure as ApiError).message).toBe("request failed (500)");
  });

  it("propagates network failures untouched", async () => {
    const fetchFn = async () => {
      throw new TypeError("fetch failed");
    };
    const client = new ServiceClient("", fetchFn);
    await expect(client.listCases()).rejects.toThrow("fetch failed");
  });
});
