use myops::{grid_to_rows, make_volume, rows_to_grid};

#[test]
fn rows_round_trip() {
    let rows = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
    let g = rows_to_grid(&rows).unwrap();
    assert_eq!(g.dims(), (2, 3));
    assert_eq!(g.get(1, 0), 4.0);
    assert_eq!(grid_to_rows(&g), rows);
}

#[test]
fn ragged_and_empty_rows_are_rejected() {
    assert!(rows_to_grid(&[vec![1u8, 0], vec![1]]).is_err());
    assert!(rows_to_grid::<u8>(&[]).is_err());
    assert!(rows_to_grid::<u8>(&[vec![]]).is_err());
}

#[test]
fn volume_dims_must_match() {
    assert!(make_volume((2, 2, 1), vec![0.0; 4], true).is_ok());
    assert!(make_volume((2, 2, 2), vec![0.0; 4], true).is_err());
}
