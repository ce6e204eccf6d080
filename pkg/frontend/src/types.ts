export type PanelType = 'single' | 'multi_nonbio' | 'multi_bio_plots' | 'multi_bio_assays';

export const PANEL_TYPES: PanelType[] = [
  'single',
  'multi_nonbio',
  'multi_bio_plots',
  'multi_bio_assays',
];

/** POST body for /clusters/{id}/annotations; must match the server schema. */
export type AnnotationPayload = {
  annotator_id: string;
  panel_type: PanelType;
  global_labels: string[];
  local_labels: string[];
};

export type Taxonomy = Record<string, string[]>;

export type FormQuestion = {
  field: 'panel_type' | 'global_labels' | 'local_labels';
  prompt: string;
  options: string[] | null;
};

export type ClusterSample = {
  cluster_id: number;
  images: { image_key: string; url: string }[];
  questions: FormQuestion[];
  taxonomy: Taxonomy;
};

export type ClusterProgress = {
  cluster_id: number;
  size: number;
  annotation_count: number;
  annotators: string[];
};

export type ClusterListing = {
  limits: {
    max_annotators_per_cluster: number | null;
    max_clusters_per_annotator: number | null;
  };
  clusters: ClusterProgress[];
};
