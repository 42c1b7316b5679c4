pub mod grad;
