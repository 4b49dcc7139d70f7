// SPDX-License-Identifier: Apache-2.0

//! HTTP routes over [`App`] and the `serve` process host.

use std::sync::Arc;
use std::time::Duration as StdDuration;

use addictfree_core::diversion::PointOfInterest;
use addictfree_core::domain::UserId;
use addictfree_core::stats::YearMonth;
use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, FromRequestParts, Path, Query, Request, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, NaiveDate, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::watch;
use tracing::{error, info, warn};

use crate::app::{App, AppError, EventInput, FeedbackInput, FenceInput, FixInput, NewUser, Principal};

pub type SharedApp = Arc<App>;

#[derive(Debug)]
pub enum ApiError {
    Unauthorized,
    App(AppError),
}

impl From<AppError> for ApiError {
    fn from(e: AppError) -> Self {
        ApiError::App(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let e = match self {
            ApiError::Unauthorized => {
                let body = json!({"error": {"code": "Unauthorized", "message": "missing or unknown bearer token"}});
                return (StatusCode::UNAUTHORIZED, [(header::WWW_AUTHENTICATE, "Bearer")], Json(body)).into_response();
            }
            ApiError::App(e) => e,
        };
        let status = match &e {
            AppError::NotFound(_) => StatusCode::NOT_FOUND,
            AppError::Rejected { code: "NoModel", .. } => StatusCode::NOT_FOUND,
            AppError::Conflict { .. } => StatusCode::CONFLICT,
            AppError::Store(addictfree_store::StoreError::VersionConflict { .. }) => StatusCode::CONFLICT,
            AppError::Rejected { .. } | AppError::Constraints(_) => StatusCode::UNPROCESSABLE_ENTITY,
            AppError::BadRequest(_) => StatusCode::BAD_REQUEST,
            AppError::Forbidden => StatusCode::FORBIDDEN,
            AppError::Store(_) | AppError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            error!(error = %e, "request failed");
        }
        let mut body = json!({"error": {"code": e.code(), "message": e.to_string()}});
        if let AppError::Constraints(v) = &e {
            body["error"]["violations"] = serde_json::to_value(v).unwrap_or_default();
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Authenticated caller, from `Authorization: Bearer <token>`.
pub struct Auth(pub Principal);

impl FromRequestParts<SharedApp> for Auth {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, app: &SharedApp) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .ok_or(ApiError::Unauthorized)?;
        app.authenticate(token).map(Auth).ok_or(ApiError::Unauthorized)
    }
}

/// JSON body whose rejections use the service's error format.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(r) => Err(AppError::BadRequest(rejection_message(&r)).into()),
        }
    }
}

fn rejection_message(r: &JsonRejection) -> String {
    r.body_text()
}

/// Runs blocking app work off the async executor.
async fn blocking<T, F>(app: &SharedApp, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&App) -> Result<T, AppError> + Send + 'static,
{
    let app = app.clone();
    tokio::task::spawn_blocking(move || f(&app))
        .await
        .map_err(|e| AppError::Internal(format!("worker panicked: {e}")))?
        .map_err(ApiError::from)
}

pub fn router(app: SharedApp) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/users", post(create_user))
        .route("/v1/users/{id}", get(get_user))
        .route("/v1/users/{id}/events", post(post_event).get(list_events))
        .route("/v1/users/{id}/fixes", post(post_fix))
        .route("/v1/users/{id}/feedback", post(post_feedback))
        .route("/v1/fences", post(post_fence))
        .route("/v1/users/{id}/fences", get(list_fences))
        .route("/v1/users/{id}/summary/daily", get(daily))
        .route("/v1/users/{id}/summary/weekly", get(weekly))
        .route("/v1/users/{id}/summary/monthly", get(monthly))
        .route("/v1/users/{id}/prediction", get(prediction))
        .route("/v1/users/{id}/notifications", get(notifications))
        .route("/v1/users/{id}/connections", get(connections))
        .route("/v1/users/{id}/messages", get(inbox))
        .route("/v1/messages", post(send_message))
        .route("/v1/posts", post(create_post).get(feed))
        .route("/v1/posts/{id}/comments", post(add_comment))
        .route("/v1/pois", post(post_pois).get(list_pois))
        .with_state(app)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "parallel": cfg!(feature = "parallel"),
    }))
}

async fn create_user(
    State(app): State<SharedApp>,
    Auth(who): Auth,
    Body(new): Body<NewUser>,
) -> Result<(StatusCode, Json<crate::app::CreatedUser>), ApiError> {
    if who != Principal::Operator {
        return Err(AppError::Forbidden.into());
    }
    let created = blocking(&app, move |a| a.create_user(new)).await?;
    Ok((StatusCode::CREATED, Json(created)))
}

fn user_id(who: &Principal, id: String) -> Result<UserId, ApiError> {
    let id = UserId::new(id);
    who.require(&id)?;
    Ok(id)
}

async fn get_user(
    State(app): State<SharedApp>,
    Auth(who): Auth,
    Path(id): Path<String>,
) -> ApiResult<addictfree_core::domain::UserProfile> {
    let id = user_id(&who, id)?;
    Ok(Json(blocking(&app, move |a| a.user(&id)).await?))
}

async fn post_event(
    State(app): State<SharedApp>,
    Auth(who): Auth,
    Path(id): Path<String>,
    Body(input): Body<EventInput>,
) -> Result<(StatusCode, Json<addictfree_core::domain::ConsumptionEvent>), ApiError> {
    let id = user_id(&who, id)?;
    let ev = blocking(&app, move |a| a.ingest_event(&id, input)).await?;
    Ok((StatusCode::CREATED, Json(ev)))
}

async fn list_events(
    State(app): State<SharedApp>,
    Auth(who): Auth,
    Path(id): Path<String>,
) -> ApiResult<Vec<addictfree_core::domain::ConsumptionEvent>> {
    let id = user_id(&who, id)?;
    Ok(Json(blocking(&app, move |a| {
        a.user(&id)?;
        a.events(&id)
    })
    .await?))
}

async fn post_fix(
    State(app): State<SharedApp>,
    Auth(who): Auth,
    Path(id): Path<String>,
    Body(input): Body<FixInput>,
) -> ApiResult<crate::app::FixOutcome> {
    let id = user_id(&who, id)?;
    Ok(Json(blocking(&app, move |a| a.ingest_fix(&id, input)).await?))
}

async fn post_feedback(
    State(app): State<SharedApp>,
    Auth(who): Auth,
    Path(id): Path<String>,
    Body(input): Body<FeedbackInput>,
) -> Result<(StatusCode, Json<addictfree_core::domain::DailyFeedback>), ApiError> {
    let id = user_id(&who, id)?;
    let fb = blocking(&app, move |a| a.submit_feedback(&id, input)).await?;
    Ok((StatusCode::CREATED, Json(fb)))
}

async fn post_fence(
    State(app): State<SharedApp>,
    Auth(who): Auth,
    Body(input): Body<FenceInput>,
) -> Result<(StatusCode, Json<crate::app::FenceSet>), ApiError> {
    let set = blocking(&app, move |a| a.create_fence(&who, input)).await?;
    Ok((StatusCode::CREATED, Json(set)))
}

async fn list_fences(
    State(app): State<SharedApp>,
    Auth(who): Auth,
    Path(id): Path<String>,
) -> ApiResult<crate::app::FenceSet> {
    let id = user_id(&who, id)?;
    Ok(Json(blocking(&app, move |a| Ok(a.fences_for(&a.user(&id)?))).await?))
}

#[derive(Deserialize)]
struct DateQuery {
    date: Option<NaiveDate>,
}

#[derive(Deserialize)]
struct WeekQuery {
    week_start: Option<NaiveDate>,
}

#[derive(Deserialize)]
struct MonthQuery {
    month: Option<YearMonth>,
}

#[derive(Deserialize)]
struct HorizonQuery {
    horizon: Option<usize>,
}

#[derive(Deserialize)]
struct SinceQuery {
    since: Option<DateTime<Utc>>,
}

#[derive(Deserialize)]
struct KQuery {
    k: Option<usize>,
}

/// Query-string extractor with the service's error format.
pub struct Params<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequestParts<S> for Params<T> {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, Self::Rejection> {
        Query::<T>::from_request_parts(parts, state)
            .await
            .map(|Query(v)| Params(v))
            .map_err(|r| AppError::BadRequest(r.body_text()).into())
    }
}

async fn daily(
    State(app): State<SharedApp>,
    Auth(who): Auth,
    Path(id): Path<String>,
    Params(q): Params<DateQuery>,
) -> ApiResult<addictfree_core::stats::DailySummary> {
    let id = user_id(&who, id)?;
    Ok(Json(blocking(&app, move |a| a.daily(&id, q.date)).await?))
}

async fn weekly(
    State(app): State<SharedApp>,
    Auth(who): Auth,
    Path(id): Path<String>,
    Params(q): Params<WeekQuery>,
) -> ApiResult<addictfree_core::stats::WeeklyScores> {
    let id = user_id(&who, id)?;
    Ok(Json(blocking(&app, move |a| a.weekly(&id, q.week_start)).await?))
}

async fn monthly(
    State(app): State<SharedApp>,
    Auth(who): Auth,
    Path(id): Path<String>,
    Params(q): Params<MonthQuery>,
) -> ApiResult<addictfree_core::stats::MonthlySeries> {
    let id = user_id(&who, id)?;
    Ok(Json(blocking(&app, move |a| a.monthly(&id, q.month)).await?))
}

async fn prediction(
    State(app): State<SharedApp>,
    Auth(who): Auth,
    Path(id): Path<String>,
    Params(q): Params<HorizonQuery>,
) -> ApiResult<addictfree_core::predictor::Forecast> {
    let id = user_id(&who, id)?;
    let horizon = q.horizon.unwrap_or(24);
    Ok(Json(blocking(&app, move |a| a.prediction(&id, horizon)).await?))
}

async fn notifications(
    State(app): State<SharedApp>,
    Auth(who): Auth,
    Path(id): Path<String>,
    Params(q): Params<SinceQuery>,
) -> ApiResult<Vec<addictfree_core::diversion::Notification>> {
    let id = user_id(&who, id)?;
    Ok(Json(blocking(&app, move |a| a.notifications(&id, q.since)).await?))
}

async fn connections(
    State(app): State<SharedApp>,
    Auth(who): Auth,
    Path(id): Path<String>,
    Params(q): Params<KQuery>,
) -> ApiResult<Vec<addictfree_core::community::ConnectionSuggestion>> {
    let id = user_id(&who, id)?;
    let k = q.k.unwrap_or(5);
    Ok(Json(blocking(&app, move |a| a.connections(&id, k)).await?))
}

async fn inbox(
    State(app): State<SharedApp>,
    Auth(who): Auth,
    Path(id): Path<String>,
) -> ApiResult<Vec<addictfree_core::community::Message>> {
    let id = user_id(&who, id)?;
    Ok(Json(blocking(&app, move |a| a.inbox(&id)).await?))
}

/// The author is the caller; the operator must name one.
fn author(who: &Principal, given: Option<UserId>) -> Result<UserId, ApiError> {
    match (who, given) {
        (Principal::User(u), None) => Ok(u.clone()),
        (p, Some(u)) => {
            p.require(&u)?;
            Ok(u)
        }
        (Principal::Operator, None) => Err(AppError::BadRequest("author_id is required for the operator".into()).into()),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewMessage {
    #[serde(default)]
    from: Option<UserId>,
    to: UserId,
    body: String,
}

async fn send_message(
    State(app): State<SharedApp>,
    Auth(who): Auth,
    Body(m): Body<NewMessage>,
) -> Result<(StatusCode, Json<addictfree_core::community::Message>), ApiError> {
    let from = author(&who, m.from)?;
    let msg = blocking(&app, move |a| a.send_message(&from, &m.to, &m.body)).await?;
    Ok((StatusCode::CREATED, Json(msg)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewPost {
    #[serde(default)]
    author_id: Option<UserId>,
    title: String,
    body: String,
}

async fn create_post(
    State(app): State<SharedApp>,
    Auth(who): Auth,
    Body(p): Body<NewPost>,
) -> Result<(StatusCode, Json<addictfree_core::community::Post>), ApiError> {
    let by = author(&who, p.author_id)?;
    let post = blocking(&app, move |a| a.create_post(&by, &p.title, &p.body)).await?;
    Ok((StatusCode::CREATED, Json(post)))
}

async fn feed(State(app): State<SharedApp>, Auth(_): Auth) -> ApiResult<Vec<addictfree_core::community::Post>> {
    Ok(Json(blocking(&app, |a| a.feed()).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewComment {
    #[serde(default)]
    author_id: Option<UserId>,
    body: String,
}

async fn add_comment(
    State(app): State<SharedApp>,
    Auth(who): Auth,
    Path(post_id): Path<String>,
    Body(c): Body<NewComment>,
) -> Result<(StatusCode, Json<addictfree_core::community::Comment>), ApiError> {
    let by = author(&who, c.author_id)?;
    let comment = blocking(&app, move |a| a.add_comment(&post_id, &by, &c.body)).await?;
    Ok((StatusCode::CREATED, Json(comment)))
}

#[derive(Serialize)]
struct Imported {
    imported: usize,
}

async fn post_pois(
    State(app): State<SharedApp>,
    Auth(who): Auth,
    Body(pois): Body<Vec<PointOfInterest>>,
) -> ApiResult<Imported> {
    if who != Principal::Operator {
        return Err(AppError::Forbidden.into());
    }
    let imported = blocking(&app, move |a| a.import_pois(pois)).await?;
    Ok(Json(Imported { imported }))
}

async fn list_pois(State(app): State<SharedApp>, Auth(_): Auth) -> ApiResult<Vec<PointOfInterest>> {
    Ok(Json(app.pois()))
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("address {0} is already in use")]
    AddressInUse(String),
    #[error("listening on {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    App(#[from] AppError),
}

/// Time until the next multiple of `every` after `now`, so ticks land on
/// whole hours with the default interval.
fn until_next_slot(now: DateTime<Utc>, every: u64) -> StdDuration {
    let every = every.max(1) as i64;
    let rem = now.timestamp().rem_euclid(every);
    StdDuration::from_secs((every - rem) as u64)
}

async fn tick_loop(app: SharedApp, mut stop: watch::Receiver<bool>) {
    let every = app.config().tick_interval_s;
    loop {
        let wait = until_next_slot(app.now(), every);
        tokio::select! {
            _ = tokio::time::sleep(wait) => {}
            _ = stop.changed() => return,
        }
        let a = app.clone();
        match tokio::task::spawn_blocking(move || a.hourly_tick(a.now())).await {
            Ok(Ok(_)) => {}
            Ok(Err(e)) => warn!(error = %e, "tick failed"),
            Err(e) => error!(error = %e, "tick panicked"),
        }
    }
}

async fn dispatch_loop(app: SharedApp, mut stop: watch::Receiver<bool>) {
    let mut every = tokio::time::interval(StdDuration::from_secs(app.config().dispatch_interval_s));
    loop {
        tokio::select! {
            _ = every.tick() => {}
            _ = stop.changed() => return,
        }
        let a = app.clone();
        match tokio::task::spawn_blocking(move || a.dispatch(a.now())).await {
            Ok(Ok(sent)) if !sent.is_empty() => info!(count = sent.len(), "delivered notifications"),
            Ok(Ok(_)) => {}
            Ok(Err(e)) => warn!(error = %e, "dispatch failed"),
            Err(e) => error!(error = %e, "dispatch panicked"),
        }
    }
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

/// Serves until `shutdown` resolves, then stops the background loops,
/// delivers whatever is due and flushes the store.
pub async fn serve_until(
    app: SharedApp,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let addr = app.config().listen_address.clone();
    let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => ServeError::AddressInUse(addr.clone()),
        _ => ServeError::Bind {
            addr: addr.clone(),
            source: e,
        },
    })?;
    info!(address = %listener.local_addr()?, "listening");
    let (stop_tx, stop_rx) = watch::channel(false);
    let ticker = tokio::spawn(tick_loop(app.clone(), stop_rx.clone()));
    let dispatcher = tokio::spawn(dispatch_loop(app.clone(), stop_rx));
    axum::serve(listener, router(app.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    info!("shutting down");
    let _ = stop_tx.send(true);
    let _ = ticker.await;
    let _ = dispatcher.await;
    let a = app.clone();
    tokio::task::spawn_blocking(move || a.shutdown())
        .await
        .map_err(|e| AppError::Internal(e.to_string()))??;
    Ok(())
}

pub async fn serve(app: SharedApp) -> Result<(), ServeError> {
    serve_until(app, shutdown_signal()).await
}
