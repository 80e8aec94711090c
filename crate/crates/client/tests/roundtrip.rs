use denerd_api::core::workbench::{write_corpus, SyntheticSceneSpec};
use denerd_api::types::*;
use denerd_api::ErrorKind;
use denerd_client::{Client, ClientError};
use denerd_service::{router, AppState};

async fn spawn(state: AppState) -> Client {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
    Client::new(&format!("http://{addr}/"))
}

#[tokio::test]
async fn health_and_ranksum() {
    let c = spawn(AppState::new()).await;
    assert_eq!(c.health().await.unwrap().status, "ok");
    let r = c
        .ranksum(&RanksumRequest {
            x: vec![1.0, 2.0, 3.0],
            y: vec![4.0, 5.0, 6.0],
        })
        .await
        .unwrap();
    assert!((r.p_two_sided - 0.1).abs() < 1e-12);
    let err = c.ranksum(&RanksumRequest { x: vec![], y: vec![] }).await.unwrap_err();
    match err {
        ClientError::Api { status, error } => assert_eq!((status, error.kind), (422, ErrorKind::Invalid)),
        other => panic!("{other}"),
    }
}

#[tokio::test]
async fn annotations_through_the_client() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&SyntheticSceneSpec::default(), 2, dir.path()).unwrap();
    let c = spawn(AppState::with_workspace(dir.path()).unwrap()).await;
    let images = c.images().await.unwrap();
    assert_eq!(images.len(), 2);
    let id = &images[0].id;
    let png = c.image_png(id).await.unwrap();
    assert_eq!(image::load_from_memory(&png).unwrap().width(), images[0].width);
    let a = c
        .add_boxes(
            id,
            &AddBoxesRequest {
                boxes: vec![[4, 4, 6, 6]],
                annotator: "x".into(),
                revision: Some(0),
            },
        )
        .await
        .unwrap();
    assert_eq!(a.revision, 1);
    let stale = c
        .remove_boxes(
            id,
            &RemoveBoxesRequest {
                rect: [0, 0, 20, 20],
                revision: Some(0),
            },
        )
        .await
        .unwrap_err();
    let api = stale.api().unwrap();
    assert_eq!((api.kind, api.current_revision), (ErrorKind::Conflict, Some(1)));
    assert_eq!(c.annotations(id).await.unwrap().boxes.len(), 1);
    assert_eq!(c.expression_png(id).await.unwrap_err().api().unwrap().kind, ErrorKind::NotFound);
}

#[tokio::test]
async fn unreachable_server_is_a_transport_error() {
    let c = Client::new("http://127.0.0.1:1");
    assert!(matches!(c.health().await, Err(ClientError::Transport(_))));
}
